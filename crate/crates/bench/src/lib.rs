//! Shared setup for the training benchmarks.

use qflow_core::trainers::{Streams, TrainState};
use qflow_core::{DatasetName, Method, OfflineDataset2D, TrainConfig};

/// Lab-width config on the Swiss roll for `method` with `flow_steps` Euler steps.
pub fn lab_config(method: Method, flow_steps: usize) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.method = method;
    cfg.network.policy_hidden = vec![64; 3];
    cfg.network.value_hidden = vec![64; 3];
    cfg.network.flow_steps = flow_steps;
    cfg.dataset.name = DatasetName::SwissRoll;
    cfg
}

pub fn setup(cfg: &TrainConfig) -> (OfflineDataset2D, TrainState, Streams) {
    let ds = OfflineDataset2D::generate(cfg.dataset.name, cfg.dataset.n, cfg.dataset.noise, cfg.seed)
        .expect("dataset");
    let st = TrainState::new(cfg, 0, 2).expect("state");
    (ds, st, Streams::new(cfg.seed))
}
