//! Ising models on `{0,1}^p`: exact enumeration, Gibbs sampling, and graph
//! recovery by EBIC-tuned logistic neighbourhood selection.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::log_sum_exp;
use crate::criteria::{ebic_score, select_best};
use crate::error::{Error, Result};
use crate::family::{sigmoid, Dataset, ExponentialFamily, SupportSet};
use crate::fit::{refit_candidates, FitOptions};
use crate::path::{candidate_supports, lasso_path, PathOptions};
use crate::seed::rng;

/// `P(x) ∝ exp{Σ_j ζ_j x_j + ½ Σ_{j≠k} Θ_jk x_j x_k}` with `Θ` symmetric and
/// zero on the diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct IsingParameters {
    zeta: DVector<f64>,
    theta: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawParams {
    zeta: Vec<f64>,
    theta: Vec<Vec<f64>>,
}

impl TryFrom<RawParams> for IsingParameters {
    type Error = Error;

    fn try_from(raw: RawParams) -> Result<Self> {
        let p = raw.zeta.len();
        if raw.theta.len() != p || raw.theta.iter().any(|r| r.len() != p) {
            return Err(Error::InvalidArgument(format!("theta must be {p}x{p}")));
        }
        let theta = DMatrix::from_fn(p, p, |i, j| raw.theta[i][j]);
        IsingParameters::new(DVector::from_vec(raw.zeta), theta)
    }
}

impl From<IsingParameters> for RawParams {
    fn from(p: IsingParameters) -> Self {
        RawParams {
            zeta: p.zeta.iter().copied().collect(),
            theta: p.theta.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }
}

impl IsingParameters {
    pub fn new(zeta: DVector<f64>, theta: DMatrix<f64>) -> Result<Self> {
        let p = zeta.len();
        if p == 0 || theta.shape() != (p, p) {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: theta.nrows(),
            });
        }
        for i in 0..p {
            if theta[(i, i)] != 0.0 {
                return Err(Error::InvalidArgument(format!("theta[{i},{i}] must be zero")));
            }
            for j in 0..i {
                if theta[(i, j)] != theta[(j, i)] {
                    return Err(Error::InvalidArgument(format!("theta is not symmetric at ({i},{j})")));
                }
            }
        }
        if zeta.iter().chain(theta.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite Ising parameter".into()));
        }
        Ok(IsingParameters { zeta, theta })
    }

    /// Uniform edge weight on the edges of `graph`.
    pub fn from_graph(graph: &GraphEstimate, edge_weight: f64, zeta: f64) -> Result<Self> {
        let p = graph.p;
        let mut theta = DMatrix::zeros(p, p);
        for &(j, k) in &graph.edges {
            theta[(j, k)] = edge_weight;
            theta[(k, j)] = edge_weight;
        }
        IsingParameters::new(DVector::from_element(p, zeta), theta)
    }

    pub fn p(&self) -> usize {
        self.zeta.len()
    }

    pub fn zeta(&self) -> &DVector<f64> {
        &self.zeta
    }

    pub fn theta(&self) -> &DMatrix<f64> {
        &self.theta
    }

    /// Conditional log-odds of `x_j = 1` given the other coordinates.
    pub fn log_odds(&self, j: usize, state: &[f64]) -> f64 {
        self.zeta[j]
            + (0..self.p())
                .filter(|&k| k != j)
                .map(|k| self.theta[(j, k)] * state[k])
                .sum::<f64>()
    }

    /// Unnormalized log-probability of a state.
    pub fn energy(&self, state: &[f64]) -> f64 {
        let p = self.p();
        let mut e = 0.0;
        for j in 0..p {
            e += self.zeta[j] * state[j];
            for k in 0..p {
                if k != j {
                    e += 0.5 * self.theta[(j, k)] * state[j] * state[k];
                }
            }
        }
        e
    }
}

/// Binary observations, one column per node.
#[derive(Debug, Clone, PartialEq)]
pub struct BinarySamples(DMatrix<f64>);

impl BinarySamples {
    pub fn new(x: DMatrix<f64>) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::InvalidData("empty sample matrix".into()));
        }
        if let Some(idx) = x.iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidData(format!(
                "entry at row {}, column {} is not 0/1",
                idx % x.nrows(),
                idx / x.nrows()
            )));
        }
        Ok(BinarySamples(x))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn p(&self) -> usize {
        self.0.ncols()
    }

    /// Logistic regression of `node` on every other column.
    pub fn node_regression(&self, node: usize) -> Result<Dataset> {
        let p = self.p();
        if node >= p {
            return Err(Error::InvalidArgument(format!("node {node} out of range for p = {p}")));
        }
        if p < 2 {
            return Err(Error::InvalidArgument("node regression needs p >= 2".into()));
        }
        let others: Vec<usize> = (0..p).filter(|&k| k != node).collect();
        let x = DMatrix::from_fn(self.n(), p - 1, |i, c| self.0[(i, others[c])]);
        let y = self.0.column(node).into_owned();
        Dataset::new(x, y, ExponentialFamily::Logistic)
    }
}

/// Index of a state with bit `j` holding `x_j`.
fn state_of(index: usize, p: usize) -> Vec<f64> {
    (0..p).map(|j| ((index >> j) & 1) as f64).collect()
}

pub const MAX_EXACT_NODES: usize = 15;

/// Probabilities of all `2^p` states; state `s` has `x_j = (s >> j) & 1`.
pub fn exact_distribution(params: &IsingParameters) -> Result<Vec<f64>> {
    let p = params.p();
    if p > MAX_EXACT_NODES {
        return Err(Error::DimensionTooLarge {
            dim: p,
            max: MAX_EXACT_NODES,
        });
    }
    let energies: Vec<f64> = (0..1usize << p).map(|s| params.energy(&state_of(s, p))).collect();
    let log_z = log_sum_exp(energies.iter().copied());
    Ok(energies.iter().map(|e| (e - log_z).exp()).collect())
}

/// Systematic-scan Gibbs sampler. After `burn_in` sweeps, every `thin`-th
/// sweep is kept until `n` states are collected.
pub fn gibbs_sample(
    params: &IsingParameters,
    n: usize,
    burn_in: usize,
    thin: usize,
    seed: u64,
) -> Result<BinarySamples> {
    if n == 0 || thin == 0 {
        return Err(Error::InvalidArgument("gibbs_sample needs n >= 1 and thin >= 1".into()));
    }
    let p = params.p();
    let mut r = rng(seed);
    let mut state: Vec<f64> = (0..p).map(|_| f64::from(r.random_bool(0.5))).collect();
    // neighbour lists keep the sweep cost proportional to the edge count
    let nbrs: Vec<Vec<(usize, f64)>> = (0..p)
        .map(|j| {
            (0..p)
                .filter(|&k| k != j && params.theta[(j, k)] != 0.0)
                .map(|k| (k, params.theta[(j, k)]))
                .collect()
        })
        .collect();
    let sweep = |state: &mut [f64], r: &mut rand_chacha::ChaCha8Rng| {
        for j in 0..p {
            let t = params.zeta[j] + nbrs[j].iter().map(|&(k, w)| w * state[k]).sum::<f64>();
            let u: f64 = r.random();
            state[j] = f64::from(u < sigmoid(t));
        }
    };
    for _ in 0..burn_in {
        sweep(&mut state, &mut r);
    }
    let mut out = DMatrix::zeros(n, p);
    for i in 0..n {
        for _ in 0..thin {
            sweep(&mut state, &mut r);
        }
        for j in 0..p {
            out[(i, j)] = state[j];
        }
    }
    Ok(BinarySamples(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeighborhoodOptions {
    pub path: PathOptions,
    pub fit: FitOptions,
}

impl Default for NeighborhoodOptions {
    fn default() -> Self {
        NeighborhoodOptions {
            path: PathOptions {
                with_intercept: true,
                ..Default::default()
            },
            fit: FitOptions {
                with_intercept: true,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodSelection {
    pub node: usize,
    /// In original node labels; never contains `node`.
    pub neighbors: SupportSet,
    /// Set when no candidate could be scored and the empty neighbourhood was used.
    pub flagged: bool,
    pub candidates: usize,
    pub failed_fits: usize,
}

/// Candidate neighbourhoods of `node` in regression-local column indices.
pub(crate) fn node_candidates(
    data: &Dataset,
    q_cap: usize,
    opts: &NeighborhoodOptions,
) -> Result<Vec<SupportSet>> {
    let mut path_opts = opts.path;
    path_opts.with_intercept = true;
    let cap = path_opts.max_support.unwrap_or(usize::MAX).min(q_cap).min(data.p());
    path_opts.max_support = Some(cap);
    let path = lasso_path(data, &path_opts)?;
    Ok(candidate_supports(&path.points, q_cap))
}

pub(crate) fn to_node_labels(local: &SupportSet, node: usize) -> SupportSet {
    SupportSet::from_indices(local.iter().map(|k| if k >= node { k + 1 } else { k }))
}

/// EBIC-tuned logistic neighbourhood selection for one node. The node
/// regression has an unpenalized intercept and `p − 1` covariates, which is
/// the covariate count used in the EBIC penalty.
pub fn neighborhood_select(
    samples: &BinarySamples,
    node: usize,
    gamma: f64,
    q_cap: usize,
    opts: &NeighborhoodOptions,
) -> Result<NeighborhoodSelection> {
    let data = samples.node_regression(node)?;
    let candidates = node_candidates(&data, q_cap, opts)?;
    let mut fit_opts = opts.fit;
    fit_opts.with_intercept = true;
    let fits = refit_candidates(&data, &candidates, &fit_opts);
    let failed = fits.iter().filter(|f| f.is_err()).count();
    let scores: Vec<_> = fits
        .iter()
        .filter_map(|f| f.as_ref().ok())
        .filter_map(|f| ebic_score(f, data.n(), data.p(), gamma).ok())
        .collect();
    let (local, flagged) = match select_best(&scores) {
        Ok(s) => (s, false),
        Err(_) => (SupportSet::empty(), true),
    };
    Ok(NeighborhoodSelection {
        node,
        neighbors: to_node_labels(&local, node),
        flagged,
        candidates: candidates.len(),
        failed_fits: failed,
    })
}

/// Neighbourhood selection at every node, in parallel, in node order.
pub fn select_all_neighborhoods(
    samples: &BinarySamples,
    gamma: f64,
    q_cap: usize,
    opts: &NeighborhoodOptions,
) -> Result<Vec<NeighborhoodSelection>> {
    (0..samples.p())
        .into_par_iter()
        .map(|j| neighborhood_select(samples, j, gamma, q_cap, opts))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombineRule {
    And,
    Or,
}

impl CombineRule {
    pub fn name(self) -> &'static str {
        match self {
            CombineRule::And => "and",
            CombineRule::Or => "or",
        }
    }
}

/// Undirected graph on `p` nodes, edges stored as `(j, k)` with `j < k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphJson", into = "GraphJson")]
pub struct GraphEstimate {
    pub p: usize,
    pub edges: BTreeSet<(usize, usize)>,
    pub neighborhoods: Vec<SupportSet>,
}

#[derive(Serialize, Deserialize)]
struct GraphJson {
    p: usize,
    edges: Vec<[usize; 2]>,
}

impl TryFrom<GraphJson> for GraphEstimate {
    type Error = Error;

    fn try_from(g: GraphJson) -> Result<Self> {
        GraphEstimate::from_edges(g.p, g.edges.iter().map(|e| (e[0], e[1])))
    }
}

impl From<GraphEstimate> for GraphJson {
    fn from(g: GraphEstimate) -> Self {
        GraphJson {
            p: g.p,
            edges: g.edges.iter().map(|&(j, k)| [j, k]).collect(),
        }
    }
}

impl GraphEstimate {
    pub fn from_edges<I: IntoIterator<Item = (usize, usize)>>(p: usize, edges: I) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a == b || a >= p || b >= p {
                return Err(Error::InvalidArgument(format!("invalid edge ({a},{b}) for p = {p}")));
            }
            set.insert((a.min(b), a.max(b)));
        }
        let mut nb = vec![Vec::new(); p];
        for &(j, k) in &set {
            nb[j].push(k);
            nb[k].push(j);
        }
        Ok(GraphEstimate {
            p,
            edges: set,
            neighborhoods: nb.into_iter().map(SupportSet::from_indices).collect(),
        })
    }

    /// `side × side` four-neighbour lattice, nodes numbered row by row.
    pub fn grid(side: usize) -> Self {
        let mut edges = Vec::new();
        for r in 0..side {
            for c in 0..side {
                let v = r * side + c;
                if c + 1 < side {
                    edges.push((v, v + 1));
                }
                if r + 1 < side {
                    edges.push((v, v + side));
                }
            }
        }
        GraphEstimate::from_edges(side * side, edges).expect("valid lattice")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub fn combine_graph(neighborhoods: &[SupportSet], rule: CombineRule) -> Result<GraphEstimate> {
    let p = neighborhoods.len();
    for (j, s) in neighborhoods.iter().enumerate() {
        if s.contains(j) {
            return Err(Error::SelfNeighborhood(j));
        }
        s.check_bounds(p)?;
    }
    let mut edges = BTreeSet::new();
    for (j, s) in neighborhoods.iter().enumerate() {
        for k in s.iter() {
            let mutual = neighborhoods[k].contains(j);
            let keep = match rule {
                CombineRule::And => mutual,
                CombineRule::Or => true,
            };
            if keep {
                edges.insert((j.min(k), j.max(k)));
            }
        }
    }
    Ok(GraphEstimate {
        p,
        edges,
        neighborhoods: neighborhoods.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphMetrics {
    pub psr: f64,
    pub fdr: f64,
}

/// Positive selection rate and false discovery rate over edges; each is 0
/// when its denominator is empty.
pub fn graph_metrics(estimate: &GraphEstimate, truth: &GraphEstimate) -> Result<GraphMetrics> {
    if estimate.p != truth.p {
        return Err(Error::DimensionMismatch {
            expected: truth.p,
            got: estimate.p,
        });
    }
    let hits = estimate.edges.intersection(&truth.edges).count() as f64;
    let psr = if truth.edges.is_empty() { 0.0 } else { hits / truth.edges.len() as f64 };
    let fdr = if estimate.edges.is_empty() {
        0.0
    } else {
        (estimate.edges.len() as f64 - hits) / estimate.edges.len() as f64
    };
    Ok(GraphMetrics { psr, fdr })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn random_params(p: usize, seed: u64) -> IsingParameters {
        let mut r = rng(seed);
        let zeta = DVector::from_fn(p, |_, _| r.random_range(-1.0..1.0));
        let mut theta = DMatrix::zeros(p, p);
        for j in 0..p {
            for k in 0..j {
                let v = r.random_range(-1.5..1.5);
                theta[(j, k)] = v;
                theta[(k, j)] = v;
            }
        }
        IsingParameters::new(zeta, theta).unwrap()
    }

    #[test]
    fn parameter_validation() {
        let mut t = DMatrix::zeros(2, 2);
        t[(0, 1)] = 1.0;
        assert!(IsingParameters::new(DVector::zeros(2), t.clone()).is_err());
        t[(1, 0)] = 1.0;
        assert!(IsingParameters::new(DVector::zeros(2), t.clone()).is_ok());
        t[(0, 0)] = 0.1;
        assert!(IsingParameters::new(DVector::zeros(2), t).is_err());
        let json = r#"{"zeta":[0,0],"theta":[[0,1],[1,0]]}"#;
        let p: IsingParameters = serde_json::from_str(json).unwrap();
        assert_eq!(p.theta()[(1, 0)], 1.0);
    }

    #[test]
    fn exact_two_node_formulas() {
        let flat = IsingParameters::new(DVector::zeros(2), DMatrix::zeros(2, 2)).unwrap();
        for v in exact_distribution(&flat).unwrap() {
            assert_relative_eq!(v, 0.25, epsilon = 1e-15);
        }
        for th in [-2.0, 0.3, 1.0, 4.0] {
            let mut t = DMatrix::zeros(2, 2);
            t[(0, 1)] = th;
            t[(1, 0)] = th;
            let d = exact_distribution(&IsingParameters::new(DVector::zeros(2), t).unwrap()).unwrap();
            let e = f64::exp(th);
            assert!((d[3] - e / (3.0 + e)).abs() <= 1e-12);
        }
    }

    #[test]
    fn exact_conditionals_are_logistic() {
        for p in 2..=4 {
            let params = random_params(p, 10 + p as u64);
            let d = exact_distribution(&params).unwrap();
            assert!((d.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for s in 0..1usize << p {
                let x = state_of(s, p);
                for j in 0..p {
                    let on = s | (1 << j);
                    let off = s & !(1 << j);
                    let cond = d[on] / (d[on] + d[off]);
                    let formula = sigmoid(params.log_odds(j, &x));
                    assert!((cond - formula).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn exact_distribution_is_permutation_equivariant() {
        let p = 4;
        let params = random_params(p, 21);
        let perm = [2usize, 0, 3, 1];
        let zeta = DVector::from_fn(p, |i, _| params.zeta[perm[i]]);
        let theta = DMatrix::from_fn(p, p, |i, j| params.theta[(perm[i], perm[j])]);
        let permuted = IsingParameters::new(zeta, theta).unwrap();
        let a = exact_distribution(&params).unwrap();
        let b = exact_distribution(&permuted).unwrap();
        for s in 0..1usize << p {
            // new node i is old node perm[i]
            let mut old = 0;
            for (i, &src) in perm.iter().enumerate() {
                if (s >> i) & 1 == 1 {
                    old |= 1 << src;
                }
            }
            assert!((b[s] - a[old]).abs() <= 1e-14);
        }
    }

    #[test]
    fn exact_rejects_large_p() {
        let params = IsingParameters::new(DVector::zeros(16), DMatrix::zeros(16, 16)).unwrap();
        assert!(matches!(exact_distribution(&params), Err(Error::DimensionTooLarge { .. })));
    }

    #[test]
    fn gibbs_independent_coins() {
        let p = 3;
        let flat = IsingParameters::new(DVector::zeros(p), DMatrix::zeros(p, p)).unwrap();
        let s = gibbs_sample(&flat, 100_000, 10, 1, 5).unwrap();
        for j in 0..p {
            assert!((s.matrix().column(j).mean() - 0.5).abs() <= 0.01);
        }
        let z = (0.8f64 / 0.2).ln();
        let biased = IsingParameters::new(DVector::from_element(p, z), DMatrix::zeros(p, p)).unwrap();
        let s = gibbs_sample(&biased, 100_000, 10, 1, 6).unwrap();
        for j in 0..p {
            assert!((s.matrix().column(j).mean() - 0.8).abs() <= 0.01);
        }
        let again = gibbs_sample(&biased, 100_000, 10, 1, 6).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn combine_rules() {
        let nb = vec![SupportSet::from_indices([1]), SupportSet::empty()];
        assert!(combine_graph(&nb, CombineRule::And).unwrap().edges.is_empty());
        let or = combine_graph(&nb, CombineRule::Or).unwrap();
        assert_eq!(or.edges.iter().copied().collect::<Vec<_>>(), vec![(0, 1)]);
        let sym = vec![SupportSet::from_indices([1]), SupportSet::from_indices([0])];
        assert_eq!(
            combine_graph(&sym, CombineRule::And).unwrap().edges,
            combine_graph(&sym, CombineRule::Or).unwrap().edges
        );
        let bad = vec![SupportSet::from_indices([0])];
        assert!(matches!(combine_graph(&bad, CombineRule::Or), Err(Error::SelfNeighborhood(0))));
    }

    #[test]
    fn and_edges_within_or_edges() {
        let mut r = rng(33);
        for _ in 0..50 {
            let p = 7;
            let nb: Vec<SupportSet> = (0..p)
                .map(|j| SupportSet::from_indices((0..p).filter(|&k| k != j && r.random_bool(0.3))))
                .collect();
            let and = combine_graph(&nb, CombineRule::And).unwrap();
            let or = combine_graph(&nb, CombineRule::Or).unwrap();
            assert!(and.edges.is_subset(&or.edges));
        }
    }

    #[test]
    fn metrics_counting() {
        let truth = GraphEstimate::from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4)]).unwrap();
        let m = graph_metrics(&truth, &truth).unwrap();
        assert_eq!((m.psr, m.fdr), (1.0, 0.0));
        let empty = GraphEstimate::from_edges(5, []).unwrap();
        let m = graph_metrics(&empty, &truth).unwrap();
        assert_eq!((m.psr, m.fdr), (0.0, 0.0));
        let est = GraphEstimate::from_edges(5, [(0, 1), (1, 2), (0, 4), (1, 3)]).unwrap();
        let m = graph_metrics(&est, &truth).unwrap();
        assert_eq!((m.psr, m.fdr), (0.5, 0.5));
        let other = GraphEstimate::from_edges(4, []).unwrap();
        assert!(graph_metrics(&other, &truth).is_err());
    }

    #[test]
    fn graph_json_shape() {
        let g = GraphEstimate::from_edges(4, [(2, 1), (0, 3)]).unwrap();
        assert_eq!(g.to_json().unwrap(), r#"{"p":4,"edges":[[0,3],[1,2]]}"#);
        let back = GraphEstimate::from_json(&g.to_json().unwrap()).unwrap();
        assert_eq!(back, g);
        assert!(GraphEstimate::from_json(r#"{"p":2,"edges":[[0,0]]}"#).is_err());
        let grid = GraphEstimate::grid(4);
        assert_eq!(grid.edges.len(), 24);
    }

    #[test]
    fn zero_cap_gives_empty_neighborhood() {
        let mut t = DMatrix::zeros(3, 3);
        t[(0, 1)] = 2.0;
        t[(1, 0)] = 2.0;
        let params = IsingParameters::new(DVector::from_element(3, -1.0), t).unwrap();
        let s = gibbs_sample(&params, 500, 100, 2, 9).unwrap();
        for node in 0..3 {
            let sel = neighborhood_select(&s, node, 0.5, 0, &NeighborhoodOptions::default()).unwrap();
            assert!(sel.neighbors.is_empty());
            assert!(!sel.neighbors.contains(node));
        }
    }

    #[test]
    fn node_label_mapping() {
        let local = SupportSet::from_indices([0, 2, 3]);
        assert_eq!(to_node_labels(&local, 2).indices(), &[0, 3, 4]);
    }
}
