//! Run configuration.
//!
//! A [`TrainConfig`] fully determines a run together with its seed. Two
//! profiles provide defaults: `2d` (wide ReLU networks, 25 Euler steps,
//! bandit-style critic) and `standard` (GELU networks, 10 Euler steps).

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs2d::DatasetName;
use crate::error::{Error, Result};
use crate::nets::Activation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Qflow,
    Fbrac,
    Fql,
    Fawac,
    Rejection,
    IvmBptt,
    OuterGuidance,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Qflow,
        Method::Fbrac,
        Method::Fql,
        Method::Fawac,
        Method::Rejection,
        Method::IvmBptt,
        Method::OuterGuidance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Qflow => "qflow",
            Method::Fbrac => "fbrac",
            Method::Fql => "fql",
            Method::Fawac => "fawac",
            Method::Rejection => "rejection",
            Method::IvmBptt => "ivm_bptt",
            Method::OuterGuidance => "outer_guidance",
        }
    }

    /// Methods that train the intermediate value network.
    pub fn uses_inter_value(self) -> bool {
        matches!(self, Method::Qflow | Method::IvmBptt)
    }

    /// Methods whose policy target is scaled by `1/λ`.
    pub fn uses_guidance(self) -> bool {
        matches!(self, Method::Qflow | Method::OuterGuidance)
    }

    /// Methods with a behavior-cloning coefficient `α`.
    pub fn uses_bc_coefficient(self) -> bool {
        matches!(self, Method::Fbrac | Method::Fql | Method::IvmBptt)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Profile {
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "standard")]
    Standard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Min,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: DatasetName,
    pub n: usize,
    /// Noise std in generator units; `None` picks the per-dataset default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    /// Load this CSV (with its JSON sidecar) instead of generating.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainParams {
    /// Guidance coefficient; the value-gradient term is scaled by `1/lambda`.
    pub lambda: f64,
    /// Behavior-cloning coefficient. `inf` disables the value term entirely.
    pub alpha: f64,
    /// Advantage temperature of weighted regression.
    pub beta: f64,
    pub batch_size: usize,
    /// `None` picks 2000 (5000 for two_spirals).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bc_epochs: Option<u64>,
    pub rl_epochs: u64,
    /// Overrides the RL-phase gradient step count when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
    pub eta: f64,
    pub lr: f64,
    pub gamma: f64,
    pub rejection_candidates: usize,
    /// Global-norm clip on the policy gradient. Diagnostics only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    /// Write measured wall-clock times into the metrics CSV. Off keeps the
    /// CSV byte-reproducible; timings always go to `step_times.csv`.
    pub record_wall_clock: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub policy_hidden: Vec<usize>,
    pub value_hidden: Vec<usize>,
    pub activation: Activation,
    pub time_embed_dim: usize,
    pub flow_steps: usize,
    pub ensemble_size: usize,
    pub inter_value_ensemble: usize,
    pub aggregation: Aggregation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub epsilon: f64,
    pub consistency_states: usize,
    pub consistency_trajs: usize,
    pub tau_grid_points: usize,
    pub landscape_taus: Vec<f64>,
    pub landscape_resolution: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub profile: Profile,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub train: TrainParams,
    pub network: NetworkConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_profile(Profile::TwoD)
    }
}

impl TrainConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let (policy_hidden, value_hidden, activation, flow_steps, gamma) = match profile {
            Profile::TwoD => (
                vec![512, 512, 512, 512, 256],
                vec![512; 4],
                Activation::Relu,
                25,
                0.0,
            ),
            Profile::Standard => (vec![512; 4], vec![512; 4], Activation::Gelu, 10, 0.99),
        };
        Self {
            method: Method::Qflow,
            profile,
            seed: 0,
            dataset: DatasetConfig {
                name: DatasetName::SwissRoll,
                n: 10_000,
                noise: None,
                path: None,
            },
            train: TrainParams {
                lambda: 1.0,
                alpha: 1.0,
                beta: 1.0,
                batch_size: 256,
                bc_epochs: None,
                rl_epochs: 100,
                steps: None,
                eta: 0.005,
                lr: 3e-4,
                gamma,
                rejection_candidates: 32,
                grad_clip: None,
                record_wall_clock: false,
            },
            network: NetworkConfig {
                policy_hidden,
                value_hidden,
                activation,
                time_embed_dim: 16,
                flow_steps,
                ensemble_size: 2,
                inter_value_ensemble: 2,
                aggregation: Aggregation::Mean,
            },
            eval: EvalConfig {
                n_samples: 4096,
                epsilon: 0.3,
                consistency_states: 1,
                consistency_trajs: 1000,
                tau_grid_points: 11,
                landscape_taus: vec![0.0, 0.25, 0.5, 0.75, 1.0],
                landscape_resolution: 41,
            },
        }
    }

    pub fn bc_epochs(&self) -> u64 {
        self.train.bc_epochs.unwrap_or(match self.dataset.name {
            DatasetName::TwoSpirals => 5000,
            _ => 2000,
        })
    }

    /// Gradient steps per pass over `n` samples.
    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.train.batch_size.max(1)) as u64
    }

    pub fn bc_steps(&self, n: usize) -> u64 {
        self.bc_epochs() * self.steps_per_epoch(n)
    }

    pub fn rl_steps(&self, n: usize) -> u64 {
        self.train
            .steps
            .unwrap_or(self.train.rl_epochs * self.steps_per_epoch(n))
    }

    /// `1/λ`; zero when `λ = ∞`.
    pub fn inv_lambda(&self) -> f64 {
        1.0 / self.train.lambda
    }

    /// Weights `(value term, BC term)` for reparameterized objectives.
    /// `α = ∞` means pure behavior cloning.
    pub fn value_and_bc_weights(&self) -> (f64, f64) {
        if self.train.alpha.is_infinite() {
            (0.0, 1.0)
        } else {
            (1.0, self.train.alpha)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        let n = &self.network;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.method.uses_guidance() && !(t.lambda > 0.0) {
            return bad(format!("lambda must be > 0, got {}", t.lambda));
        }
        if self.method.uses_bc_coefficient() && !(t.alpha >= 0.0) {
            return bad(format!("alpha must be >= 0, got {}", t.alpha));
        }
        if !t.beta.is_finite() || t.beta < 0.0 {
            return bad(format!("beta must be finite and >= 0, got {}", t.beta));
        }
        if t.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&t.eta) {
            return bad(format!("eta must lie in [0, 1], got {}", t.eta));
        }
        if !(0.0..1.0).contains(&t.gamma) {
            return bad(format!("gamma must lie in [0, 1), got {}", t.gamma));
        }
        if !(t.lr > 0.0) {
            return bad(format!("lr must be > 0, got {}", t.lr));
        }
        if t.rejection_candidates == 0 {
            return bad("rejection_candidates must be >= 1".into());
        }
        if n.flow_steps == 0 || n.ensemble_size == 0 || n.inter_value_ensemble == 0 {
            return bad("flow_steps and ensemble sizes must be >= 1".into());
        }
        if n.time_embed_dim == 0 || n.time_embed_dim % 2 != 0 {
            return bad(format!(
                "time_embed_dim must be even and positive, got {}",
                n.time_embed_dim
            ));
        }
        if n.policy_hidden.contains(&0) || n.value_hidden.contains(&0) {
            return bad("hidden widths must be >= 1".into());
        }
        if self.dataset.n == 0 {
            return bad("dataset.n must be >= 1".into());
        }
        let e = &self.eval;
        if !(e.epsilon > 0.0) || e.n_samples == 0 || e.tau_grid_points < 2 {
            return bad("eval: epsilon > 0, n_samples >= 1, tau_grid_points >= 2".into());
        }
        if e.landscape_resolution < 2 || e.landscape_taus.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return bad("eval: landscape_resolution >= 2 and taus in [0, 1]".into());
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}
