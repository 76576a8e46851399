//! Fixtures shared by the benchmarks in `benches/`.

use fedtta_core::data::GaussianTask;
use fedtta_core::{LabeledDataset, MlpSpec, ModelParams, TaskSpec};

/// One client's data and a model pair at initialization.
pub struct Fixture {
    pub data: LabeledDataset,
    pub psi: ModelParams,
    pub phi: ModelParams,
}

impl Fixture {
    /// `n` samples of a 10-class task in 20 dimensions, models with hidden
    /// widths `[hidden, hidden]` and `[32, 32, 32]`.
    pub fn new(n: usize, hidden: usize) -> Self {
        let task = GaussianTask::new(&TaskSpec::new(10, 20), 0).expect("valid task");
        let data = task.sample(n, 1);
        let pred = MlpSpec::with_hidden(20, &[hidden, hidden], 10).expect("valid spec");
        let adapt = MlpSpec::with_hidden(10, &[32, 32, 32], 1).expect("valid spec");
        Self {
            data,
            psi: ModelParams::init(&pred, 2),
            phi: ModelParams::init(&adapt, 3),
        }
    }
}
