//! Fixtures shared by the benchmarks.

use ebic::experiment::simulate_glm;
use ebic::ising::{GraphEstimate, IsingParameters};
use ebic::{Dataset, ExponentialFamily, FitOptions, FittedModel, SupportSet};

pub fn logistic_data(n: usize, p: usize, seed: u64) -> Dataset {
    simulate_glm(n, p, 3.min(p), 1.0, ExponentialFamily::Logistic, seed)
        .expect("valid simulation")
        .0
}

pub fn grid_model(side: usize, strength: f64) -> IsingParameters {
    IsingParameters::from_graph(&GraphEstimate::grid(side), strength, 0.0).expect("valid lattice")
}

pub fn fitted(data: &Dataset, support: &[usize]) -> FittedModel {
    ebic::fit_mle(data, &SupportSet::from_indices(support.iter().copied()), &FitOptions::default())
        .expect("fit converges")
}
