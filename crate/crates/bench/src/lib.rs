//! Fixtures shared by the benchmarks.

use advdiff_core::data::generate_synthetic;
use advdiff_core::diffusion::StepParams;
use advdiff_core::topology::{build_combination_matrix, generate_random_graph, CombinationRule};
use advdiff_core::{AttackSpec, CombinationMatrix, Dataset, LabeledSample, NetworkState, SyntheticSpec};

pub struct Fixture {
    pub a: CombinationMatrix,
    pub state: NetworkState,
    pub data: Dataset,
    pub params: StepParams,
}

impl Fixture {
    /// `k` agents on a connected random graph, 10-dimensional synthetic data.
    pub fn new(k: usize) -> Self {
        let g = generate_random_graph(k, 0.2_f64.max(3.0 / k as f64).min(1.0), 7).expect("graph");
        let a = build_combination_matrix(&g, CombinationRule::Metropolis).expect("matrix");
        let (data, _) = generate_synthetic(&SyntheticSpec { n_train: 1000, n_test: 1, ..Default::default() }).expect("data");
        let state = NetworkState::initialize(k, data.dim(), 0, false).expect("state");
        let params = StepParams { mu: 0.01, rho: 0.1, attack: AttackSpec::exact(0.3).expect("attack") };
        Fixture { a, state, data, params }
    }

    /// One batch of `b` samples per agent, taken in order.
    pub fn batches(&self, b: usize) -> Vec<Vec<&LabeledSample>> {
        let n = self.data.len();
        (0..self.state.num_agents())
            .map(|k| (0..b).map(|i| &self.data[(k * b + i) % n]).collect())
            .collect()
    }
}
