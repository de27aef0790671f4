//! Experiment configuration: a single JSON document validated on load.

use std::path::{Path, PathBuf};

use rkbsnet_core::canonical::{CanonicalForm, CanonicalParams};
use rkbsnet_core::complexity::TwoLayerExample;
use rkbsnet_core::{NetworkSpec, TrainingSet, TruncationPolicy};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Top-level experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Network architecture.
    pub network: NetworkConfig,
    /// Seed for weight initialisation and random data.
    #[serde(default)]
    pub seed: u64,
    /// Training-set source.
    pub data: DataSource,
    /// Learning rate `η`.
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Number of analysed gradient-descent steps `T`.
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Convergence budgets.
    #[serde(default)]
    pub budgets: Budgets,
    /// Power-series truncation.
    #[serde(default)]
    pub truncation: TruncationConfig,
    /// Uniform feature-map scaling used by the kernel and equivalence checks.
    #[serde(default)]
    pub scaling: UniformScaling,
    /// Options for `kernel`.
    #[serde(default)]
    pub kernel: KernelOptions,
    /// Options for `canonical`.
    #[serde(default)]
    pub canonical: CanonicalOptions,
    /// Options for `rademacher`.
    #[serde(default)]
    pub rademacher: RademacherOptions,
    /// Options for `sweep`.
    #[serde(default)]
    pub sweep: Option<SweepOptions>,
    /// Default output path, overridden by `--out`.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_eta() -> f64 {
    1e-2
}

fn default_steps() -> usize {
    1
}

/// Tanh network architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Input dimension `n`.
    pub input_dim: usize,
    /// Layer widths `H^[0], …, H^[D-1]`.
    pub widths: Vec<usize>,
    /// Per-layer pre-activation bias scale `α^[j]`.
    pub alpha: Vec<f64>,
    /// Start from zero biases instead of drawing them with the weights.
    #[serde(default)]
    pub zero_biases: bool,
}

/// Where the training set comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Values given in the config.
    Inline(InlineData),
    /// A JSON file holding `{"inputs": …, "targets": …}`, relative to the config.
    File(PathBuf),
    /// `count` points drawn uniformly from `[-1, 1]` with the experiment seed.
    Random {
        /// Number of samples `N`.
        count: usize,
    },
}

/// Inline training pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineData {
    /// Inputs, each of length `n`.
    pub inputs: Vec<Vec<f64>>,
    /// Targets, each of the output width.
    pub targets: Vec<Vec<f64>>,
}

/// Convergence budgets, all in `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budgets {
    /// Output-layer budget `ε`.
    pub eps: f64,
    /// Cross-layer budget `χ`.
    pub chi: f64,
    /// Slack `δ`.
    pub delta: f64,
    /// Data-side budget `ε̃` used by the convergence checks.
    pub eps_tilde: f64,
}

impl Default for Budgets {
    fn default() -> Self {
        Self { eps: 0.1, chi: 0.2, delta: 1e-3, eps_tilde: 0.5 }
    }
}

/// Serialisable mirror of [`TruncationPolicy`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationConfig {
    /// Series order `L`.
    pub order: usize,
    /// Tail tolerance.
    pub tolerance: f64,
    /// Radius-of-convergence guard factor.
    pub guard: f64,
    /// Largest adaptive order.
    pub max_order: usize,
    /// Adaptive order selection.
    pub adaptive: bool,
}

impl Default for TruncationConfig {
    fn default() -> Self {
        let p = TruncationPolicy::default();
        Self { order: p.order, tolerance: p.tolerance, guard: p.guard, max_order: p.max_order, adaptive: p.adaptive }
    }
}

impl TruncationConfig {
    /// The equivalent core policy.
    pub fn policy(&self) -> TruncationPolicy {
        TruncationPolicy { order: self.order, tolerance: self.tolerance, guard: self.guard, max_order: self.max_order, adaptive: self.adaptive }
    }
}

/// Uniform values for `μ`, `ω`, `ω̃`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniformScaling {
    /// Data-side scale `μ`.
    pub mu: f64,
    /// Step-side bias scale `ω`.
    pub omega: f64,
    /// Step-side shadow-weight scale `ω̃`.
    pub omega_tilde: f64,
}

impl Default for UniformScaling {
    fn default() -> Self {
        Self { mu: 1.0, omega: 1.0, omega_tilde: 1.0 }
    }
}

/// Options for `kernel`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelOptions {
    /// Points for the data kernel; defaults to the training inputs.
    #[serde(default)]
    pub points: Option<Vec<Vec<f64>>>,
    /// Multiples of the back-propagation step used for the weight kernel.
    pub step_scales: Vec<f64>,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self { points: None, step_scales: vec![0.25, 0.5, 1.0] }
    }
}

/// Options for `canonical`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CanonicalOptions {
    /// Use the slack-free form of the layer conditions.
    #[serde(default)]
    pub tight_form: bool,
    /// Tune `α` by bisection so the cross-layer condition holds with equality.
    #[serde(default)]
    pub solve_alpha: bool,
}

impl CanonicalOptions {
    /// The selected condition form.
    pub fn form(&self) -> CanonicalForm {
        if self.tight_form {
            CanonicalForm::Tight
        } else {
            CanonicalForm::Slackened
        }
    }
}

/// Options for `rademacher`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RademacherOptions {
    /// Closed-form two-layer example evaluated alongside the network bound.
    #[serde(default)]
    pub example: Option<ExampleConfig>,
}

/// Serialisable mirror of [`TwoLayerExample`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleConfig {
    /// Hidden width `H0`.
    pub h0: f64,
    /// Sample count `N`.
    pub n: f64,
    /// Loss Lipschitz constant.
    pub lipschitz: f64,
    /// Hidden-layer `α`.
    pub alpha0: f64,
    /// Output-layer `α`.
    pub alpha1: f64,
    /// Step-size scale `s`.
    pub s: f64,
    /// Number of steps.
    pub steps: f64,
    /// Frobenius norm of the output weights.
    pub w1_frob: f64,
    /// Output budget `ε`.
    pub eps: f64,
    /// Cross-layer budget `χ`.
    pub chi: f64,
}

impl From<ExampleConfig> for TwoLayerExample {
    fn from(e: ExampleConfig) -> Self {
        TwoLayerExample {
            h0: e.h0,
            n: e.n,
            lipschitz: e.lipschitz,
            alpha0: e.alpha0,
            alpha1: e.alpha1,
            s: e.s,
            steps: e.steps,
            w1_frob: e.w1_frob,
            eps: e.eps,
            chi: e.chi,
        }
    }
}

/// Swept quantity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// `λ' = (1 − x²)²` over the normalised step `x = ‖t‖_∞/B`.
    LambdaPrime,
    /// Learning rate: canonical `λ` and the one-step bound.
    Eta,
    /// Sample count: the one-step Rademacher bound.
    N,
    /// Hidden width of the two-layer example.
    H0,
    /// Multiples of the back-propagation step: canonical `ν`, `λ`, `λ'`.
    StepScale,
}

/// Options for `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepOptions {
    /// Quantity on the horizontal axis.
    pub axis: SweepAxis,
    /// Grid values, reported in this order.
    pub values: Vec<f64>,
}

fn open_unit(name: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} = {v} must lie in (0, 1)")))
    }
}

impl ExperimentConfig {
    /// Parses a config from JSON text and validates it.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(format!("schema violation: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let DataSource::File(p) = &cfg.data {
            if p.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.data = DataSource::File(base.join(p));
            }
        }
        Ok(cfg)
    }

    /// Checks budgets, the truncation policy and the network spec.
    pub fn validate(&self) -> Result<(), CliError> {
        let b = &self.budgets;
        open_unit("budgets.eps", b.eps)?;
        open_unit("budgets.chi", b.chi)?;
        open_unit("budgets.delta", b.delta)?;
        open_unit("budgets.eps_tilde", b.eps_tilde)?;
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(CliError::Config(format!("eta = {} must be positive", self.eta)));
        }
        if self.steps == 0 {
            return Err(CliError::Config("steps must be at least 1".into()));
        }
        self.truncation.policy().validate().map_err(|e| CliError::Config(format!("truncation: {e}")))?;
        let s = &self.scaling;
        if !(s.mu > 0.0 && s.omega > 0.0 && s.omega_tilde > 0.0) {
            return Err(CliError::Config("scaling entries must be positive".into()));
        }
        self.spec()?;
        if let DataSource::Random { count: 0 } = self.data {
            return Err(CliError::Config("data.random.count must be at least 1".into()));
        }
        if let Some(sw) = &self.sweep {
            if sw.values.is_empty() {
                return Err(CliError::Config("sweep.values must not be empty".into()));
            }
        }
        Ok(())
    }

    /// The network spec.
    pub fn spec(&self) -> Result<NetworkSpec, CliError> {
        let n = &self.network;
        NetworkSpec::tanh(n.input_dim, n.widths.clone(), n.alpha.clone()).map_err(|e| CliError::Config(format!("network: {e}")))
    }

    /// Canonical-construction parameters from the budgets.
    pub fn canonical_params(&self) -> CanonicalParams {
        CanonicalParams { eps: self.budgets.eps, chi: self.budgets.chi, delta: self.budgets.delta, eta: self.eta, form: self.canonical.form() }
    }

    /// Materialises the training set.
    pub fn training_set(&self, spec: &NetworkSpec) -> Result<TrainingSet, CliError> {
        let data = match &self.data {
            DataSource::Inline(d) => TrainingSet::new(d.inputs.clone(), d.targets.clone()),
            DataSource::File(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read data file {}: {e}", p.display())))?;
                let d: InlineData = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("data file {}: {e}", p.display())))?;
                TrainingSet::new(d.inputs, d.targets)
            }
            DataSource::Random { count } => crate::commands::random_data(spec, *count, self.seed),
        };
        data.validate(spec).map_err(|e| CliError::Config(format!("data: {e}")))?;
        Ok(data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"network": {"input_dim": 2, "widths": [2, 1], "alpha": [0.5, 0.5]}, "data": {"random": {"count": 3}}}"#;

    #[test]
    fn defaults_fill_optional_sections() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.steps, 1);
        assert_eq!(cfg.budgets, Budgets::default());
        assert_eq!(cfg.truncation.policy(), TruncationPolicy::default());
        assert!(cfg.sweep.is_none());
    }

    #[test]
    fn serialisation_round_trips() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn invalid_network_is_a_config_error() {
        let bad = MINIMAL.replace("[0.5, 0.5]", "[0.5]");
        assert!(matches!(ExperimentConfig::from_json(&bad), Err(CliError::Config(_))));
    }

    #[test]
    fn zero_steps_rejected() {
        let bad = MINIMAL.replace("}}}", "}}, \"steps\": 0}");
        assert!(matches!(ExperimentConfig::from_json(&bad), Err(CliError::Config(_))));
    }

    #[test]
    fn random_data_has_requested_shape() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        let spec = cfg.spec().unwrap();
        let data = cfg.training_set(&spec).unwrap();
        assert_eq!(data.len(), 3);
        assert!(data.inputs.iter().flatten().chain(data.targets.iter().flatten()).all(|v| v.abs() <= 1.0));
    }
}
