//! Run configuration: strict JSON schema, defaults and parse-time validation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::TaskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhiUpload {
    /// Clients upload φ; the server averages it and blends from that average.
    Keep,
    /// Client φ is dropped; the server blends from its own previous φ.
    Discard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub layers: usize,
    pub experts: usize,
    pub rank: usize,
    /// LoRA scale numerator; `None` means `alpha = rank`.
    pub alpha: Option<f64>,
    pub router_std: f64,
    /// Experts `0..hot_experts` get a router row aligned with the mean input.
    pub hot_experts: usize,
    pub skew_strength: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 8,
            layers: 2,
            experts: 8,
            rank: 2,
            alpha: None,
            router_std: 0.1,
            hot_experts: 0,
            skew_strength: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgConfig {
    pub enabled: bool,
    pub clip: f64,
}

impl Default for PgConfig {
    fn default() -> Self {
        Self { enabled: true, clip: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DmrConfig {
    pub enabled: bool,
    pub phi_upload: PhiUpload,
}

impl Default for DmrConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            phi_upload: PhiUpload::Keep,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub rounds: usize,
    pub clients: usize,
    /// Budget tiers, assigned to clients cyclically.
    pub budgets: Vec<f64>,
    pub k_max: usize,
    pub n_p: usize,
    pub model: ModelConfig,
    pub eta: f64,
    /// Local SGD steps per round (Γ).
    pub local_steps: usize,
    pub batch_size: usize,
    pub zeta: f64,
    pub eps: f64,
    pub lambda: f64,
    pub phi_min: f64,
    pub phi_max: f64,
    pub pg: PgConfig,
    pub dmr: DmrConfig,
    /// Fraction of clients sampled each round.
    pub participation: f64,
    pub dirichlet_alpha: f64,
    pub task: TaskSpec,
    /// Train clients on the rayon pool; results are identical either way.
    pub parallel: bool,
    pub output_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rounds: 20,
            clients: 8,
            budgets: vec![0.125, 0.25],
            k_max: 8,
            n_p: 2,
            model: ModelConfig::default(),
            eta: 0.02,
            local_steps: 5,
            batch_size: 32,
            zeta: 0.9,
            eps: 1e-6,
            lambda: 0.01,
            phi_min: -1.0,
            phi_max: 1.0,
            pg: PgConfig::default(),
            dmr: DmrConfig::default(),
            participation: 1.0,
            dirichlet_alpha: 0.5,
            task: TaskSpec::default(),
            parallel: false,
            output_dir: None,
        }
    }
}

fn field(name: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{name}: {msg}"))
}

/// `⌊K_max·β⌋`, at least 1.
pub fn derive_sparsity(beta: f64, k_max: usize) -> Result<usize> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::Config(format!("budget must lie in (0, 1], got {beta}")));
    }
    if k_max == 0 {
        return Err(Error::Config("k_max must be at least 1".into()));
    }
    Ok(((k_max as f64 * beta).floor() as usize).max(1))
}

impl RunConfig {
    /// Parses inline JSON text, applies defaults and validates.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Fully-defaulted form; parsing it again yields the same config.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// `K_c` for each client, with budgets assigned cyclically.
    pub fn client_sparsity(&self) -> Result<Vec<usize>> {
        (0..self.clients)
            .map(|c| derive_sparsity(self.budgets[c % self.budgets.len()], self.k_max))
            .collect()
    }

    pub fn client_budget(&self, client: usize) -> f64 {
        self.budgets[client % self.budgets.len()]
    }

    /// Candidate size actually used for routing. Without DMR φ stays zero
    /// and routing is plain top-K over all experts.
    pub fn effective_n_p(&self) -> usize {
        if self.dmr.enabled {
            self.n_p
        } else {
            self.model.experts
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(field("clients", "must be at least 1"));
        }
        if self.budgets.is_empty() {
            return Err(field("budgets", "must list at least one budget"));
        }
        for &b in &self.budgets {
            if !(b > 0.0 && b <= 1.0) {
                return Err(field("budgets", format!("each budget must lie in (0, 1], got {b}")));
            }
        }
        let m = &self.model;
        if m.experts < 2 {
            return Err(field("model.experts", "must be at least 2"));
        }
        if m.layers == 0 {
            return Err(field("model.layers", "must be at least 1"));
        }
        if m.hidden_dim == 0 {
            return Err(field("model.hidden_dim", "must be at least 1"));
        }
        if m.rank == 0 || m.rank > m.hidden_dim.min(self.task.input_dim) {
            return Err(field(
                "model.rank",
                format!("must lie in 1..=min(hidden_dim, task.input_dim), got {}", m.rank),
            ));
        }
        if let Some(a) = m.alpha {
            if !(a > 0.0) || !a.is_finite() {
                return Err(field("model.alpha", format!("must be positive, got {a}")));
            }
        }
        if !(m.router_std >= 0.0) || !m.router_std.is_finite() {
            return Err(field("model.router_std", "must be finite and nonnegative"));
        }
        if m.hot_experts > m.experts {
            return Err(field("model.hot_experts", "cannot exceed model.experts"));
        }
        if !m.skew_strength.is_finite() {
            return Err(field("model.skew_strength", "must be finite"));
        }
        if self.k_max == 0 || self.k_max > m.experts {
            return Err(field("k_max", format!("must lie in 1..=model.experts ({}), got {}", m.experts, self.k_max)));
        }
        if self.n_p == 0 || self.n_p > m.experts {
            return Err(field("n_p", format!("must lie in 1..=model.experts ({}), got {}", m.experts, self.n_p)));
        }
        let k_hi = self.client_sparsity()?.into_iter().max().unwrap_or(1);
        if self.dmr.enabled && k_hi > self.n_p {
            return Err(field(
                "n_p",
                format!("largest client sparsity K_c = {k_hi} exceeds candidate size n_p = {}", self.n_p),
            ));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(field("eta", format!("must be positive, got {}", self.eta)));
        }
        if self.local_steps == 0 {
            return Err(field("local_steps", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(field("batch_size", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.zeta) {
            return Err(field("zeta", format!("must lie in [0, 1], got {}", self.zeta)));
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(field("eps", format!("must be positive, got {}", self.eps)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(field("lambda", format!("must be nonnegative, got {}", self.lambda)));
        }
        if !(self.phi_min < self.phi_max) || !self.phi_min.is_finite() || !self.phi_max.is_finite() {
            return Err(field("phi_min", "need finite phi_min < phi_max"));
        }
        if !(self.pg.clip > 0.0) {
            return Err(field("pg.clip", format!("must be positive, got {}", self.pg.clip)));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(field("participation", format!("must lie in (0, 1], got {}", self.participation)));
        }
        if !(self.dirichlet_alpha > 0.0) || !self.dirichlet_alpha.is_finite() {
            return Err(field("dirichlet_alpha", "must be positive and finite"));
        }
        self.task.validate().map_err(|e| match e {
            Error::Config(msg) => field("task", msg),
            other => other,
        })?;
        if self.clients > self.task.samples {
            return Err(field(
                "clients",
                format!("{} clients but task.samples is {}", self.clients, self.task.samples),
            ));
        }
        Ok(())
    }
}
