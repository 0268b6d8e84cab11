//! Experiment configuration, read from TOML or JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentId {
    Example1,
    Example2,
    Example3,
    #[default]
    Custom,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    pub seed: u64,
    /// Accuracy target used to size the truncation index when `k` is unset.
    pub epsilon: Option<f64>,
    pub k: Option<usize>,
    pub out: Option<PathBuf>,
    pub example1: Example1Params,
    pub example2: Example2Params,
    pub example3: Example3Params,
    pub chain: Option<ChainParams>,
    pub linear: Option<LinearParams>,
    pub learning: LearningParams,
    pub simulation: SimulationParams,
    pub threshold: ThresholdParams,
}

/// Battery level on `{-(d_s + d_w) .. d_s + d_w}` with saturation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Example1Params {
    pub p_g: f64,
    pub p_d: f64,
    pub d_w: i64,
    pub d_s: i64,
    pub s_max: i64,
    pub s_min: i64,
    pub q: f64,
    pub gamma: f64,
    pub ell: f64,
    pub initial: i64,
    /// Elapsed time of the reported probe state `(initial, y)`.
    pub probe_elapsed: usize,
}

impl Default for Example1Params {
    fn default() -> Self {
        Self {
            p_g: 0.8,
            p_d: 0.8,
            d_w: 1,
            d_s: 99,
            s_max: 99,
            s_min: -99,
            q: 0.95,
            gamma: 0.9,
            ell: 100.0,
            initial: 0,
            probe_elapsed: 49,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Example2Params {
    pub q: f64,
    pub gamma: f64,
    pub k: usize,
    /// Panels over the node count.
    pub by_n: PanelByN,
    /// Panels over the node noise variance.
    pub by_variance: PanelByVariance,
}

impl Default for Example2Params {
    fn default() -> Self {
        Self { q: 0.9, gamma: 0.85, k: 200, by_n: PanelByN::default(), by_variance: PanelByVariance::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PanelByN {
    pub a: f64,
    pub ell: f64,
    pub variance: f64,
    pub n_values: Vec<usize>,
}

impl Default for PanelByN {
    fn default() -> Self {
        Self { a: 0.8, ell: 0.4, variance: 6.0, n_values: (2..=40).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PanelByVariance {
    pub a: f64,
    pub ell: f64,
    pub n: usize,
    pub variances: Vec<f64>,
}

impl Default for PanelByVariance {
    fn default() -> Self {
        Self { a: 0.9, ell: 1.0, n: 5, variances: (0..=20).map(|i| i as f64 * 0.5).collect() }
    }
}

/// Two-candidate opinion dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Example3Params {
    pub n: u32,
    pub p_aa: f64,
    pub p_bb: f64,
    pub ell: f64,
    pub gamma: f64,
    pub q: f64,
    pub k: usize,
    /// Voter counts whose first-collect times are reported, as `[votes_for_a, ..]`.
    pub probes: Vec<u32>,
}

impl Default for Example3Params {
    fn default() -> Self {
        Self { n: 50, p_aa: 0.95, p_bb: 0.98, ell: 0.02, gamma: 0.8, q: 0.95, k: 50, probes: vec![45, 5] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    WeightedAbs,
    Kl,
    SupNorm,
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Map,
    Mean,
    Identity,
    InfinitePopulation,
}

/// A finite-state network with decoupled node dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainParams {
    pub states: Vec<f64>,
    pub population: u32,
    /// Row-stochastic node transition matrix.
    pub local_kernel: Vec<Vec<f64>>,
    pub q: f64,
    pub gamma: f64,
    pub cost: CostKind,
    pub fee: f64,
    #[serde(default = "one")]
    pub weight: f64,
    pub estimator: EstimatorKind,
    /// Initial counts per state; defaults to the atom closest to uniform.
    #[serde(default)]
    pub initial: Option<Vec<u32>>,
    #[serde(default)]
    pub anchor: Option<usize>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum GraphSource {
    Complete { n: usize },
    Star { n: usize },
    DenseCsv { path: PathBuf },
    EdgeCsv { path: PathBuf, n: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphParams {
    pub source: GraphSource,
    pub alpha: Vec<f64>,
    #[serde(default = "one_usize")]
    pub modes: usize,
    pub node_variance: f64,
}

fn one_usize() -> usize {
    1
}

/// Linear network either in mode coordinates (`a`, `sigma_w`) or through a
/// graph polynomial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearParams {
    #[serde(default)]
    pub a: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub sigma_w: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub graph: Option<GraphParams>,
    pub q: f64,
    pub gamma: f64,
    pub ell: f64,
    #[serde(default = "default_linear_k")]
    pub k: usize,
    /// Noisy observation model for the finite-horizon schedule.
    #[serde(default)]
    pub c: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub sigma_xi: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub horizon: Option<usize>,
}

fn default_linear_k() -> usize {
    200
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateKind {
    Harmonic,
    Rescaled,
    Polynomial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningParams {
    pub sweeps: usize,
    pub rate: RateKind,
    /// Scale of the rescaled rate; defaults to `1 / (1 - gamma)`.
    pub kappa: Option<f64>,
    pub exponent: f64,
    pub drift_threshold: f64,
    pub drift_window: usize,
    pub record_every: usize,
    /// Logged trace for offline learning.
    pub trace: Option<PathBuf>,
    /// Steps simulated to estimate the model in model-based mode.
    pub model_samples: usize,
}

impl Default for LearningParams {
    fn default() -> Self {
        Self {
            sweeps: 3000,
            rate: RateKind::Rescaled,
            kappa: None,
            exponent: 0.8,
            drift_threshold: 1e-4,
            drift_window: 100,
            record_every: 10,
            trace: None,
            model_samples: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationParams {
    /// Monte-Carlo paths; 0 skips the simulation check in `example`.
    pub paths: usize,
    /// Tail tolerance relative to `c_max / (1 - gamma)`.
    pub relative_tail: f64,
    pub horizon: Option<usize>,
    /// Strategy CSV to simulate; the planned strategy is used otherwise.
    pub strategy: Option<PathBuf>,
}

impl Default for SimulationParams {
    fn default() -> Self {
        Self { paths: 10_000, relative_tail: 1e-6, horizon: None, strategy: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdParams {
    pub resolution: u32,
    pub horizon: usize,
    pub paths: usize,
    /// Defaults to the model's collection fee.
    pub collection_cost: Option<f64>,
}

impl Default for ThresholdParams {
    fn default() -> Self {
        Self { resolution: 20, horizon: 60, paths: 2000, collection_cost: None }
    }
}

impl ExperimentConfig {
    pub fn preset(id: ExperimentId) -> Self {
        Self { experiment: id, ..Self::default() }
    }

    /// Parses TOML or JSON, detected from the first non-blank character.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let trimmed = text.trim_start();
        let cfg: Self = if trimmed.starts_with('{') {
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid JSON config: {e}")))?
        } else {
            toml::from_str(text).map_err(|e| CliError::Config(format!("invalid TOML config: {e}")))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if let Some(e) = self.epsilon {
            if !(e > 0.0) {
                return bad(format!("epsilon must be positive, got {e}"));
            }
        }
        let probs = [
            ("example1.p_g", self.example1.p_g),
            ("example1.p_d", self.example1.p_d),
            ("example1.q", self.example1.q),
            ("example2.q", self.example2.q),
            ("example3.p_aa", self.example3.p_aa),
            ("example3.p_bb", self.example3.p_bb),
            ("example3.q", self.example3.q),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        for (name, g) in
            [("example1.gamma", self.example1.gamma), ("example2.gamma", self.example2.gamma), ("example3.gamma", self.example3.gamma)]
        {
            if !(g > 0.0 && g < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {g}"));
            }
        }
        if self.example1.d_w != 1 {
            return bad("example1.d_w: the noise law is defined through p_g and p_d for d_w = 1 only".into());
        }
        if self.example1.d_s <= 0 || self.example1.s_max > self.example1.d_s + 1 || self.example1.s_min < -self.example1.d_s - 1 {
            return bad("example1 saturation levels must lie in the state space".into());
        }
        if self.example3.n == 0 || self.example3.probes.iter().any(|&p| p > self.example3.n) {
            return bad("example3 probes must be vote counts in 0..=n".into());
        }
        if self.simulation.paths == 1 {
            return bad("simulation.paths must be 0 (skip) or at least 2".into());
        }
        if !(self.simulation.relative_tail > 0.0 && self.simulation.relative_tail < 1.0) {
            return bad("simulation.relative_tail must lie in (0, 1)".into());
        }
        if let Some(c) = &self.chain {
            if c.states.len() < 2 || c.local_kernel.len() != c.states.len() {
                return bad("chain.local_kernel must be square over chain.states".into());
            }
            if c.population == 0 {
                return bad("chain.population must be positive".into());
            }
            if !(c.gamma > 0.0 && c.gamma < 1.0) || !(0.0..=1.0).contains(&c.q) {
                return bad("chain needs 0 < gamma < 1 and 0 <= q <= 1".into());
            }
        }
        if let Some(l) = &self.linear {
            if l.graph.is_none() && (l.a.is_none() || l.sigma_w.is_none()) {
                return bad("linear needs either a graph or both a and sigma_w".into());
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
