//! Convergence checkers for the induced feature maps and the canonical
//! scaling under which a back-propagation step is a regularised minimiser.
//!
//! With `s^[j]²` the fanout constants and `ρ` the activation's radius of
//! convergence, the data features converge on the whole input box when
//!
//! ```text
//! μ^[0]_i² ≤ (1−ε_φ^[0])√ρ / s^[0]²
//! μ^[j]_i² ≤ 1 / ( s^[j]²/((1−ε_φ^[j])√ρ)
//!                  + (1/H^[j]) Σ_k ω_k² (W_Oki²/ω̃_ki² + 1) (φ^[j-1]/H^[j-1]) / ((1−ε_φ^[j])√ρ) )
//! ```
//!
//! and then `‖Φ^[j]‖²_F ≤ φ^[j] = H^[j] σ̄((1−ε_φ^[j])√ρ)`. The step features
//! converge when every `θ` numerator satisfies `T^[j]_i ≤ (1−ε_ψ^[j]) μ^[j]_i²`,
//! and then `‖Ψ^[j]‖²_F ≤ ψ^[j] = H^[j] (1−ε_ψ^[j])/ε_ψ^[j]`.
//!
//! The canonical scaling picks `ω_k² = ‖Ψ^[j-1]_k‖²`,
//! `ω̃_ki² = ‖W_Δ:i‖²/(1−δ) − W_Δki²` and
//!
//! ```text
//! μ^[D-1]_i² = T_i / κ⁻¹(T_i ν/4),      ν = (4/‖t^[D-1]‖²_∞) κ((1−ε_ψ)/(1−χ))
//! μ^[j]_k²   = T_k² / (T_k − ‖W_Δ^[j+1]‖²_F/(1−δ))      (j < D−1)
//! ```
//!
//! which makes every adjoint of the `‖Ψ‖²` gradient equal to `ν/4`, so that
//! `∂‖Ψ(W_Δ)‖²/∂W_Δ = ν W_Δ` exactly at the back-propagation step.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::features::ScalingConfig;
use crate::geometry::{fanout_constants, phi_norm_sq, psi_norm_sq_grad, psi_recursion, step_magnitudes, StepVariant};
use crate::linalg::Mat;
use crate::net::{backprop_step, NetworkSpec, TrainingSet, WeightState, WeightStep};
use crate::scalar::bisect;
use crate::series::{kappa, kappa_inv, sigma_bar, sigma_bar_deriv, sigma_bar_domain, sigma_bar_inv, theta, TruncationPolicy};

/// Relative slack allowed when comparing a value against a bound that was
/// itself produced by a square root and a square.
const BOUND_SLACK: f64 = 8.0 * f64::EPSILON;

fn within(value: f64, bound: f64) -> bool {
    value <= bound + BOUND_SLACK * bound.abs()
}

fn open_unit(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::Parameter { name, value: v, why: "must lie strictly inside (0, 1)" })
    }
}

fn sqrt_roc(spec: &NetworkSpec, j: usize) -> f64 {
    libm::sqrt(spec.roc[j])
}

/// Which statement of the canonical-scaling conditions to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CanonicalForm {
    /// Slackened form: the χ-equality reads `‖W_Δ^[j+1]‖²_F = (1−δ)χ‖t^[j]‖²_∞`
    /// and the `ε_φ` recursion divides column norms by `1−δ`.
    #[default]
    Slackened,
    /// Tight form, which drops the `1−δ` factors (`δ → 0`) in those two places.
    Tight,
}

impl CanonicalForm {
    fn slack(self, delta: f64) -> f64 {
        match self {
            CanonicalForm::Slackened => 1.0 - delta,
            CanonicalForm::Tight => 1.0,
        }
    }
}

/// Convergence budgets and the quantities derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceProfile {
    /// `ε_φ^[j]` per layer.
    pub eps_phi: Vec<f64>,
    /// `ε_ψ^[j]` per layer.
    pub eps_psi: Vec<f64>,
    /// `ε = ε_φ^[D-1]`.
    pub eps: f64,
    /// Step-to-next-layer ratio `χ`.
    pub chi: f64,
    /// Shadow-weight slack `δ`.
    pub delta: f64,
    /// Shadow-weight share `ε̃` of the joint convergence conditions.
    pub eps_tilde: f64,
    /// `φ^[j]/H^[j] = σ̄((1−ε_φ^[j])√ρ)`.
    pub phi_over_h: Vec<f64>,
    /// `ψ^[j]/H^[j] = θ(1−ε_ψ^[j]) = (1−ε_ψ^[j])/ε_ψ^[j]`.
    pub psi_over_h: Vec<f64>,
    /// `L_φ^[j] = σ̄'((1−ε_φ^[j])√ρ)`, the Lipschitz constant of σ̄ at the cap.
    pub lip_phi: Vec<f64>,
    /// `L_ψ^[j] = θ'(1−ε_ψ^[j]) = 1/ε_ψ^[j]²`.
    pub lip_psi: Vec<f64>,
    /// Step caps `B^[j]²`: `(1−χ)²(1−ε)√ρ/s²` at the output layer and
    /// `(1−χ)²(1−χ^{D-1-j}ε_ψ^[D-1])(1−ε_φ^[j])√ρ/s²` below it.
    pub step_bound_sq: Vec<f64>,
    /// Dimensionless cap factors `ϖ^[j] = B^[j]² s^[j]² / ((1−ε_φ^[j])√ρ)`.
    pub varpi: Vec<f64>,
}

impl ConvergenceProfile {
    /// Builds a profile, validating every budget and deriving the caps.
    pub fn new(spec: &NetworkSpec, eps_phi: Vec<f64>, eps_psi: Vec<f64>, chi: f64, delta: f64, eps_tilde: f64, policy: &TruncationPolicy) -> Result<Self> {
        spec.validate()?;
        let d = spec.depth();
        for (what, v) in [("eps_phi", &eps_phi), ("eps_psi", &eps_psi)] {
            if v.len() != d {
                return Err(Error::Shape { what, expected: d, found: v.len() });
            }
        }
        for &e in &eps_phi {
            open_unit("eps_phi", e)?;
        }
        for &e in &eps_psi {
            open_unit("eps_psi", e)?;
        }
        open_unit("chi", chi)?;
        open_unit("delta", delta)?;
        open_unit("eps_tilde", eps_tilde)?;
        let s2 = fanout_constants(spec).s2;
        let top_psi = eps_psi[d - 1];
        let mut phi_over_h = Vec::with_capacity(d);
        let mut lip_phi = Vec::with_capacity(d);
        let mut varpi = Vec::with_capacity(d);
        let mut step_bound_sq = Vec::with_capacity(d);
        for j in 0..d {
            let zeta = (1.0 - eps_phi[j]) * sqrt_roc(spec, j);
            phi_over_h.push(sigma_bar(spec.activations[j], zeta, policy)?);
            lip_phi.push(sigma_bar_deriv(spec.activations[j], zeta, policy)?);
            let w = if j + 1 == d {
                (1.0 - chi) * (1.0 - chi)
            } else {
                (1.0 - chi) * (1.0 - chi) * (1.0 - libm::pow(chi, (d - 1 - j) as f64) * top_psi)
            };
            varpi.push(w);
            step_bound_sq.push(w * zeta / s2[j]);
        }
        let psi_over_h = eps_psi.iter().map(|&e| (1.0 - e) / e).collect();
        let lip_psi = eps_psi.iter().map(|&e| 1.0 / (e * e)).collect();
        Ok(Self { eps: eps_phi[d - 1], eps_phi, eps_psi, chi, delta, eps_tilde, phi_over_h, psi_over_h, lip_phi, lip_psi, step_bound_sq, varpi })
    }

    /// `φ^[D-1] = H^[D-1] σ̄((1−ε)√ρ)`, the cap on `‖Φ(x)‖²_F`.
    pub fn phi_cap(&self, spec: &NetworkSpec) -> f64 {
        let d = spec.depth();
        spec.width(d - 1) as f64 * self.phi_over_h[d - 1]
    }

    /// `ψ^[D-1] = H^[D-1](1−ε_ψ)/ε_ψ`, the cap on `‖Ψ(W_Δ)‖²_F`.
    pub fn psi_cap(&self, spec: &NetworkSpec) -> f64 {
        let d = spec.depth();
        spec.width(d - 1) as f64 * self.psi_over_h[d - 1]
    }
}

/// Outcome of a per-neuron bound check on one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerVerdict {
    /// Layer index.
    pub layer: usize,
    /// Whether every neuron satisfies its bound.
    pub pass: bool,
    /// Checked quantity per neuron (`μ²` for `Φ`, the θ numerator for `Ψ`).
    pub value: Vec<f64>,
    /// Admissible bound per neuron.
    pub bound: Vec<f64>,
    /// `bound − value` per neuron.
    pub margin: Vec<f64>,
    /// Neuron with the smallest margin.
    pub binding: usize,
}

impl LayerVerdict {
    fn new(layer: usize, value: Vec<f64>, bound: Vec<f64>) -> Self {
        let margin: Vec<f64> = value.iter().zip(&bound).map(|(v, b)| b - v).collect();
        let pass = value.iter().zip(&bound).all(|(&v, &b)| within(v, b));
        let binding = (0..margin.len())
            .fold(None::<usize>, |best, i| match best {
                Some(b) if !(margin[i] < margin[b]) => Some(b),
                _ => Some(i),
            })
            .unwrap_or(0);
        Self { layer, pass, value, bound, margin, binding }
    }
}

/// Per-layer verdicts of a convergence checker.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceVerdict {
    /// One verdict per layer.
    pub layers: Vec<LayerVerdict>,
    /// Whether every layer passes.
    pub pass: bool,
    /// The norm cap a passing verdict guarantees for the output layer.
    pub cap: f64,
}

impl ConvergenceVerdict {
    fn from_layers(layers: Vec<LayerVerdict>, cap: f64) -> Self {
        let pass = layers.iter().all(|l| l.pass);
        Self { layers, pass, cap }
    }

    /// `(layer, neuron)` of the first failing neuron, scanning bottom-up.
    pub fn first_failure(&self) -> Option<(usize, usize)> {
        self.layers.iter().find(|l| !l.pass).map(|l| (l.layer, l.binding))
    }
}

fn check_profile_shape(spec: &NetworkSpec, profile: &ConvergenceProfile) -> Result<()> {
    let d = spec.depth();
    if profile.eps_phi.len() != d || profile.eps_psi.len() != d {
        return Err(Error::Shape { what: "convergence profile layers", expected: d, found: profile.eps_phi.len().min(profile.eps_psi.len()) });
    }
    Ok(())
}

/// Largest `μ^[j]_i²` admitted by the data-feature convergence bound at every
/// layer and neuron, given the shadow weights of `scaling`.
pub fn phi_mu_bounds(spec: &NetworkSpec, w_o: &WeightState, scaling: &ScalingConfig, profile: &ConvergenceProfile) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    w_o.check_shape(spec)?;
    scaling.validate(spec)?;
    check_profile_shape(spec, profile)?;
    let s2 = fanout_constants(spec).s2;
    Ok((0..spec.depth())
        .map(|j| {
            let cap = (1.0 - profile.eps_phi[j]) * sqrt_roc(spec, j);
            (0..spec.width(j))
                .map(|i| {
                    let mut denom = s2[j] / cap;
                    if j > 0 {
                        let (om, omt, w) = (&scaling.omega[j], &scaling.omega_tilde[j], &w_o.layers[j].w);
                        let sum: f64 = (0..spec.in_width(j))
                            .map(|k| om[k] * om[k] * (w[(k, i)] * w[(k, i)] / (omt[(k, i)] * omt[(k, i)]) + 1.0))
                            .sum();
                        denom += sum / spec.width(j) as f64 * profile.phi_over_h[j - 1] / cap;
                    }
                    1.0 / denom
                })
                .collect()
        })
        .collect())
}

/// Checks the scale factors against the data-feature convergence bounds.
///
/// A passing verdict guarantees `‖Φ^[j](x)‖²_F ≤ φ^[j]` for every `x` in the
/// input box; see [`phi_certificate`] for an empirical spot check.
pub fn check_phi_convergence(spec: &NetworkSpec, w_o: &WeightState, scaling: &ScalingConfig, profile: &ConvergenceProfile) -> Result<ConvergenceVerdict> {
    let bounds = phi_mu_bounds(spec, w_o, scaling, profile)?;
    let layers = bounds
        .into_iter()
        .enumerate()
        .map(|(j, b)| LayerVerdict::new(j, scaling.mu[j].iter().map(|m| m * m).collect(), b))
        .collect();
    Ok(ConvergenceVerdict::from_layers(layers, profile.phi_cap(spec)))
}

/// θ numerators `T^[j]_i` of the step-feature recursion, continuing past a
/// divergent neuron by treating its norm as infinite.
fn psi_numerators(spec: &NetworkSpec, scaling: &ScalingConfig, step: &WeightStep) -> Vec<Vec<f64>> {
    let d = spec.depth();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut lower: Vec<f64> = Vec::new();
    for j in 0..d {
        let l = &step.layers[j];
        let numer: Vec<f64> = (0..spec.width(j))
            .map(|i| {
                let mut t = 2.0 * l.b[i] * l.b[i];
                if j == 0 {
                    t += 2.0 * l.w.col_norm_sq(i);
                } else {
                    t += l.w.col_norm_sq(i);
                    let (om, omt) = (&scaling.omega[j], &scaling.omega_tilde[j]);
                    for k in 0..spec.in_width(j) {
                        t += (omt[(k, i)] * omt[(k, i)] + l.w[(k, i)] * l.w[(k, i)]) * lower[k] / (om[k] * om[k]);
                    }
                }
                t
            })
            .collect();
        lower = numer
            .iter()
            .zip(&scaling.mu[j])
            .map(|(t, m)| {
                let a = t / (m * m);
                if a < 1.0 {
                    a / (1.0 - a)
                } else {
                    f64::INFINITY
                }
            })
            .collect();
        out.push(numer);
    }
    out
}

/// Checks every θ numerator against `(1−ε_ψ^[j]) μ^[j]_i²`.
///
/// A passing verdict guarantees `‖Ψ^[j](W_Δ)‖²_F ≤ H^[j](1−ε_ψ^[j])/ε_ψ^[j]`.
pub fn check_psi_convergence(spec: &NetworkSpec, scaling: &ScalingConfig, step: &WeightStep, profile: &ConvergenceProfile) -> Result<ConvergenceVerdict> {
    spec.validate()?;
    scaling.validate(spec)?;
    step.check_shape(spec)?;
    check_profile_shape(spec, profile)?;
    let layers = psi_numerators(spec, scaling, step)
        .into_iter()
        .enumerate()
        .map(|(j, t)| {
            let bound = scaling.mu[j].iter().map(|m| (1.0 - profile.eps_psi[j]) * m * m).collect();
            LayerVerdict::new(j, t, bound)
        })
        .collect();
    Ok(ConvergenceVerdict::from_layers(layers, profile.psi_cap(spec)))
}

/// Empirical check of a norm cap over a set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    /// Largest sampled squared norm.
    pub max_value: f64,
    /// Cap being certified.
    pub cap: f64,
    /// Number of samples exceeding the cap.
    pub violations: usize,
    /// Number of samples evaluated.
    pub samples: usize,
}

impl Certificate {
    fn from_values(values: impl Iterator<Item = f64>, cap: f64) -> Self {
        let (mut max_value, mut violations, mut samples) = (0.0f64, 0, 0);
        for v in values {
            max_value = max_value.max(v);
            violations += usize::from(!within(v, cap));
            samples += 1;
        }
        Self { max_value, cap, violations, samples }
    }

    /// Whether no sample exceeded the cap.
    pub fn holds(&self) -> bool {
        self.violations == 0
    }
}

/// Evaluates `‖Φ(x)‖²_F` on every sample and compares it with `φ^[D-1]`.
pub fn phi_certificate(
    spec: &NetworkSpec,
    w_o: &WeightState,
    scaling: &ScalingConfig,
    profile: &ConvergenceProfile,
    samples: &[Vec<f64>],
    policy: &TruncationPolicy,
) -> Result<Certificate> {
    let values = samples.iter().map(|x| phi_norm_sq(spec, w_o, scaling, x, policy)).collect::<Result<Vec<_>>>()?;
    Ok(Certificate::from_values(values.into_iter(), profile.phi_cap(spec)))
}

/// Evaluates `‖Ψ(W_Δ)‖²_F` on every step and compares it with `ψ^[D-1]`.
pub fn psi_certificate(spec: &NetworkSpec, scaling: &ScalingConfig, steps: &[WeightStep], profile: &ConvergenceProfile) -> Result<Certificate> {
    let values = steps
        .iter()
        .map(|s| psi_recursion(spec, scaling, s).map(|r| r.norm.last().map_or(0.0, |v| v.iter().sum())))
        .collect::<Result<Vec<_>>>()?;
    Ok(Certificate::from_values(values.into_iter(), profile.psi_cap(spec)))
}

/// A closed interval `[lo, hi]`, empty when `lo > hi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    /// Lower end.
    pub lo: f64,
    /// Upper end.
    pub hi: f64,
}

impl Interval {
    /// Whether no value satisfies both ends.
    pub fn is_empty(&self) -> bool {
        !(self.lo <= self.hi)
    }

    /// `(lo + hi)/2`.
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    /// `hi − lo`.
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// The constraint that made a joint-convergence construction infeasible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Binding {
    /// `ε_ψ^[layer]` of the backward recursion left `(0, 1)`.
    EpsPsiRecursion {
        /// Layer index.
        layer: usize,
    },
    /// No admissible `ω²` for input neuron `neuron` of `layer`.
    OmegaInterval {
        /// Layer index.
        layer: usize,
        /// Input neuron.
        neuron: usize,
    },
    /// A shadow weight `ω̃²` of the specialised construction is not positive.
    ShadowWeight {
        /// Layer index.
        layer: usize,
        /// Output neuron (column).
        neuron: usize,
    },
    /// The weight-step cap fails, so the admissible `μ²` interval is empty.
    StepCap {
        /// Layer index.
        layer: usize,
        /// Output neuron.
        neuron: usize,
    },
}

/// Intervals and caps of one layer of a joint-convergence construction.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLayer {
    /// Layer index.
    pub layer: usize,
    /// Admissible `μ_i²` per output neuron.
    pub mu_sq: Vec<Interval>,
    /// Left-hand side of the weight-step cap per output neuron
    /// (`t_i²` at layer 0, the full θ numerator above).
    pub step_lhs: Vec<f64>,
    /// Right-hand side of the weight-step cap per output neuron.
    pub step_cap: Vec<f64>,
    /// Admissible `ω_k²` per input neuron (empty at layer 0).
    pub omega_sq: Vec<Interval>,
    /// Cap on `‖ω̃_:i‖²_∞` (general construction, layers above 0).
    pub omega_tilde_sq_cap: Option<f64>,
}

/// One construction (general or specialised) of a joint-convergence report.
#[derive(Debug, Clone, PartialEq)]
pub struct JointBranch {
    /// Layers resolved so far, bottom-up.
    pub layers: Vec<JointLayer>,
    /// Scale factors and shadow weights at interval midpoints, when every
    /// interval is non-empty.
    pub scaling: Option<ScalingConfig>,
    /// First constraint that failed, if any.
    pub binding: Option<Binding>,
    /// Profile whose checkers the returned scaling satisfies.
    pub profile: ConvergenceProfile,
}

impl JointBranch {
    /// Whether the construction produced a scaling.
    pub fn feasible(&self) -> bool {
        self.scaling.is_some()
    }
}

/// Joint `Φ`/`Ψ` convergence report for one weight-step.
#[derive(Debug, Clone, PartialEq)]
pub struct JointReport {
    /// General construction: `ε_ψ` from the backward recursion, uniform
    /// `ω̃` columns at their cap, and `ω_k²` at the high end `ψ^[j-1]/H^[j-1]`
    /// of its interval, which minimises the weight-step left-hand side.
    pub general: JointBranch,
    /// Specialised construction: `ω_k² = ‖Ψ^[j-1]_k‖²` and
    /// `ω̃_ki² = ‖W_Δ:i‖²/(1−δ) − W_Δki²`, with the profile's own `ε_ψ`.
    pub specialised: JointBranch,
}

/// Backward recursion `ε_ψ^[j] = X/(X + A)` with
/// `X = (H^[j]/H^[j+1]) (φ^[j]/H^[j]) ‖W_O^[j+1]‖²_{2,∞}/((1−ε_φ^[j+1])√ρ)` and
/// `A = (1−ε̃)(1−ε_ψ^[j+1]) r^[j+1]`, where `r` is the smallest column ratio
/// `min ω̃² / max ω̃²`. This is the form for which `ψ^[j]/H^[j] = A/X`.
pub fn eps_psi_recursion(spec: &NetworkSpec, w_o: &WeightState, profile: &ConvergenceProfile, ratios: &[f64]) -> Result<Vec<f64>> {
    check_profile_shape(spec, profile)?;
    w_o.check_shape(spec)?;
    let d = spec.depth();
    let mut eps = vec![0.0; d];
    eps[d - 1] = profile.eps_psi[d - 1];
    for j in (0..d.saturating_sub(1)).rev() {
        let r = ratios.get(j + 1).copied().unwrap_or(1.0);
        let x = spec.width(j) as f64 / spec.width(j + 1) as f64 * profile.phi_over_h[j] * w_o.layers[j + 1].w.max_col_norm_sq()
            / ((1.0 - profile.eps_phi[j + 1]) * sqrt_roc(spec, j + 1));
        let a = (1.0 - profile.eps_tilde) * (1.0 - eps[j + 1]) * r;
        eps[j] = x / (x + a);
    }
    Ok(eps)
}

fn derived_profile(base: &ConvergenceProfile, eps_psi: Vec<f64>) -> ConvergenceProfile {
    let mut p = base.clone();
    p.psi_over_h = eps_psi.iter().map(|&e| (1.0 - e) / e).collect();
    p.lip_psi = eps_psi.iter().map(|&e| 1.0 / (e * e)).collect();
    p.eps_psi = eps_psi;
    p
}

#[derive(Clone, Copy, PartialEq)]
enum JointMode {
    General,
    Specialised,
}

/// Computes the admissible `μ`, `ω`, `ω̃` intervals and weight-step caps of the
/// joint convergence conditions for both constructions.
///
/// Intervals are resolved bottom-up: each layer's `μ²` is set to the midpoint
/// of its interval, which fixes `‖Ψ^[j]‖²` and hence the next layer's `ω`
/// interval. An empty interval is reported through [`JointBranch::binding`].
pub fn joint_convergence(spec: &NetworkSpec, w_o: &WeightState, step: &WeightStep, profile: &ConvergenceProfile) -> Result<JointReport> {
    spec.validate()?;
    w_o.check_shape(spec)?;
    step.check_shape(spec)?;
    check_profile_shape(spec, profile)?;
    let general = joint_branch(spec, w_o, step, profile, JointMode::General)?;
    let specialised = joint_branch(spec, w_o, step, profile, JointMode::Specialised)?;
    Ok(JointReport { general, specialised })
}

fn joint_branch(spec: &NetworkSpec, w_o: &WeightState, step: &WeightStep, base: &ConvergenceProfile, mode: JointMode) -> Result<JointBranch> {
    let d = spec.depth();
    let s2 = fanout_constants(spec).s2;
    let profile = match mode {
        JointMode::General => {
            let eps = eps_psi_recursion(spec, w_o, base, &[])?;
            if let Some(j) = eps.iter().position(|&e| !(e > 0.0 && e < 1.0)) {
                return Ok(JointBranch { layers: Vec::new(), scaling: None, binding: Some(Binding::EpsPsiRecursion { layer: j }), profile: base.clone() });
            }
            derived_profile(base, eps)
        }
        JointMode::Specialised => base.clone(),
    };
    let mut scaling = ScalingConfig::uniform(spec, 1.0, 1.0, 1.0);
    let mut layers = Vec::with_capacity(d);
    let mut lower_norms: Vec<f64> = Vec::new();
    for j in 0..d {
        let l = &step.layers[j];
        let cap_phi = (1.0 - profile.eps_phi[j]) * sqrt_roc(spec, j);
        let keep = 1.0 - profile.eps_psi[j];
        let (hj, hin) = (spec.width(j), spec.in_width(j));
        let mut layer = JointLayer { layer: j, mu_sq: Vec::new(), step_lhs: Vec::new(), step_cap: Vec::new(), omega_sq: Vec::new(), omega_tilde_sq_cap: None };
        if j == 0 {
            let upper = cap_phi / s2[0];
            for i in 0..hj {
                let t2 = 2.0 * l.b[i] * l.b[i] + 2.0 * l.w.col_norm_sq(i);
                layer.step_lhs.push(t2);
                layer.step_cap.push(keep * upper);
                layer.mu_sq.push(Interval { lo: t2 / keep, hi: upper });
            }
        } else {
            let psi_prev = profile.psi_over_h[j - 1];
            let mut omega2 = Vec::with_capacity(hin);
            for (k, &n) in lower_norms.iter().enumerate() {
                let iv = Interval { lo: n, hi: psi_prev };
                layer.omega_sq.push(iv);
                if iv.is_empty() || !(n > 0.0 || mode == JointMode::General) {
                    layers.push(layer);
                    return Ok(JointBranch { layers, scaling: None, binding: Some(Binding::OmegaInterval { layer: j, neuron: k }), profile });
                }
                omega2.push(match mode {
                    JointMode::General => psi_prev,
                    JointMode::Specialised => n,
                });
            }
            let wo = &w_o.layers[j].w;
            let wo_max = wo.max_col_norm_sq();
            let mut omt = Mat::zeros(hin, hj);
            match mode {
                JointMode::General => {
                    let share = (1.0 - profile.eps_tilde) * keep;
                    let cap = profile.eps_tilde * keep / (hin as f64 * (s2[j] / cap_phi + share / wo_max));
                    layer.omega_tilde_sq_cap = Some(cap);
                    omt = Mat::filled(hin, hj, libm::sqrt(cap));
                }
                JointMode::Specialised => {
                    for i in 0..hj {
                        let col = l.w.col_norm_sq(i) / (1.0 - profile.delta);
                        for k in 0..hin {
                            let v = col - l.w[(k, i)] * l.w[(k, i)];
                            if !(v > 0.0) {
                                layers.push(layer);
                                return Ok(JointBranch { layers, scaling: None, binding: Some(Binding::ShadowWeight { layer: j, neuron: i }), profile });
                            }
                            omt[(k, i)] = libm::sqrt(v);
                        }
                    }
                }
            }
            for i in 0..hj {
                let mut lhs = 2.0 * l.b[i] * l.b[i] + l.w.col_norm_sq(i);
                for k in 0..hin {
                    lhs += lower_norms[k] / omega2[k] * (omt[(k, i)] * omt[(k, i)] + l.w[(k, i)] * l.w[(k, i)]);
                }
                let upper = match mode {
                    JointMode::General => {
                        let min_omt = (0..hin).map(|k| omt[(k, i)] * omt[(k, i)]).fold(f64::INFINITY, f64::min);
                        let share = (1.0 - profile.eps_tilde) * keep / wo_max;
                        1.0 / (s2[j] / cap_phi + (wo.col_norm_sq(i) / (hin as f64 * min_omt) + 1.0) * share)
                    }
                    JointMode::Specialised => {
                        let denom = l.w.col_norm_sq(i) / (1.0 - profile.delta) - l.w.col_max_sq(i);
                        let term = (wo.col_norm_sq(i) / denom + hin as f64) / hj as f64 * psi_prev * profile.phi_over_h[j - 1] / cap_phi;
                        1.0 / (s2[j] / cap_phi + term)
                    }
                };
                layer.step_lhs.push(lhs);
                layer.step_cap.push(keep * upper);
                layer.mu_sq.push(Interval { lo: lhs / keep, hi: upper });
            }
            scaling.omega[j] = omega2.iter().map(|v| libm::sqrt(*v)).collect();
            scaling.omega_tilde[j] = omt;
        }
        if let Some(i) = layer.mu_sq.iter().position(|iv| iv.is_empty()) {
            layers.push(layer);
            return Ok(JointBranch { layers, scaling: None, binding: Some(Binding::StepCap { layer: j, neuron: i }), profile });
        }
        scaling.mu[j] = layer.mu_sq.iter().map(|iv| libm::sqrt(iv.midpoint())).collect();
        lower_norms = layer.step_lhs.iter().zip(&scaling.mu[j]).map(|(t, m)| theta(t / (m * m))).collect::<Result<_>>()?;
        layers.push(layer);
    }
    Ok(JointBranch { layers, scaling: Some(scaling), binding: None, profile })
}

/// Budgets for [`canonical_construct`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanonicalParams {
    /// Output-layer data budget `ε ∈ (0, 1)`.
    pub eps: f64,
    /// Step-to-next-layer ratio `χ ∈ (0, 1)`.
    pub chi: f64,
    /// Shadow-weight slack `δ ∈ (0, 1)`.
    pub delta: f64,
    /// Learning rate `η > 0` of the step, used for `λ = 1/(ην)`.
    pub eta: f64,
    /// Which statement of the conditions to apply.
    pub form: CanonicalForm,
}

impl CanonicalParams {
    /// Parameters with the default slack `δ = 1e-3` and the proved form.
    pub fn new(eps: f64, chi: f64, eta: f64) -> Self {
        Self { eps, chi, delta: 1e-3, eta, form: CanonicalForm::Slackened }
    }

    fn validate(&self) -> Result<()> {
        open_unit("eps", self.eps)?;
        open_unit("chi", self.chi)?;
        open_unit("delta", self.delta)?;
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Parameter { name: "eta", value: self.eta, why: "must be positive and finite" });
        }
        Ok(())
    }
}

/// A satisfied step-cap bound of the canonical construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapRecord {
    /// Layer index.
    pub layer: usize,
    /// `‖t^[j]‖²_∞`.
    pub value: f64,
    /// `B^[j]²`.
    pub cap: f64,
    /// `B^[j]² − ‖t^[j]‖²_∞ > 0`.
    pub margin: f64,
}

/// Result of the canonical-scaling construction.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalScalingResult {
    /// Scale factors and shadow weights.
    pub scaling: ScalingConfig,
    /// `ν = (4/‖t^[D-1]‖²_∞) κ((1−ε_ψ)/(1−χ))`.
    pub nu: f64,
    /// The same constant in the form `(4/‖t‖²_∞)(1−ε_ψ)(1−χ)/(ε_ψ−χ)²`.
    pub nu_alt: f64,
    /// `ε_ψ^[j] = χ^{D-1-j} ε_ψ` per layer.
    pub eps_psi: Vec<f64>,
    /// `ε_φ^[j]` per layer from the backward recursion.
    pub eps_phi: Vec<f64>,
    /// Whether the `σ̄⁻¹` argument of `ε_φ^[j]` was clamped to the top of the range.
    pub eps_phi_clamped: Vec<bool>,
    /// Per-layer step-cap records (all satisfied).
    pub caps: Vec<CapRecord>,
    /// Relative residuals `(‖W_Δ^[j+1]‖²_F − c χ‖t^[j]‖²_∞)/‖W_Δ^[j+1]‖²_F` of the
    /// χ-equality, with `c = 1−δ` or `1` by form; one per layer below the output.
    pub chi_residuals: Vec<f64>,
    /// Exact θ numerators `T^[j]_i` under the canonical shadow weights.
    pub numerators: Vec<Vec<f64>>,
    /// `λ = 1/(ην)`.
    pub lambda: f64,
    /// `λ' = (4η/B^[D-1]²) λ = (1 − (‖t^[D-1]‖_∞/B^[D-1])²)²`.
    pub lambda_normalised: f64,
    /// `x = ‖t^[D-1]‖_∞ / B^[D-1]`.
    pub x_top: f64,
    /// Parameters used.
    pub params: CanonicalParams,
}

impl CanonicalScalingResult {
    /// Largest absolute relative χ-equality residual.
    pub fn max_chi_residual(&self) -> f64 {
        self.chi_residuals.iter().fold(0.0f64, |m, r| m.max(r.abs()))
    }

    /// A convergence profile with this result's `ε_φ`, `ε_ψ` and the given `ε̃`.
    pub fn profile(&self, spec: &NetworkSpec, eps_tilde: f64, policy: &TruncationPolicy) -> Result<ConvergenceProfile> {
        let eps_phi = self.eps_phi.iter().map(|&e| if e > 0.0 { e } else { f64::MIN_POSITIVE }).collect();
        ConvergenceProfile::new(spec, eps_phi, self.eps_psi.clone(), self.params.chi, self.params.delta, eps_tilde, policy)
    }
}

/// `λ = 1/(ην)`.
pub fn lambda(eta: f64, nu: f64) -> f64 {
    1.0 / (eta * nu)
}

/// Normalised trade-off coefficient `λ' = (1 − x²)²` for `x = ‖t‖_∞/B ∈ [0, 1]`.
pub fn lambda_normalised(x: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain { func: "lambda_normalised", arg: x });
    }
    let q = 1.0 - x * x;
    Ok(q * q)
}

/// Relative residuals of the χ-equality for each layer below the output.
pub fn chi_residuals(spec: &NetworkSpec, step: &WeightStep, chi: f64, delta: f64, form: CanonicalForm) -> Result<Vec<f64>> {
    let t = step_magnitudes(spec, step, StepVariant::Canonical { delta })?;
    let c = form.slack(delta) * chi;
    Ok((0..spec.depth().saturating_sub(1))
        .map(|j| {
            let f = step.layers[j + 1].w.frob_sq();
            (f - c * t.inf_sq(j)) / f
        })
        .collect())
}

/// Constructs the canonical scale factors and shadow weights for a
/// back-propagation step, together with `ν`, `λ` and the step caps.
///
/// Fails with [`Error::StepCap`] naming the layer when `‖t^[j]‖²_∞ ≥ B^[j]²`,
/// and with [`Error::Degenerate`] when a shadow weight or a lower-layer scale
/// factor denominator is not positive.
pub fn canonical_construct(spec: &NetworkSpec, w_o: &WeightState, step: &WeightStep, params: CanonicalParams) -> Result<CanonicalScalingResult> {
    canonical_construct_with(spec, w_o, step, params, &TruncationPolicy::default())
}

/// [`canonical_construct`] with an explicit series policy for `σ̄`.
pub fn canonical_construct_with(spec: &NetworkSpec, w_o: &WeightState, step: &WeightStep, params: CanonicalParams, policy: &TruncationPolicy) -> Result<CanonicalScalingResult> {
    spec.validate()?;
    w_o.check_shape(spec)?;
    step.check_shape(spec)?;
    params.validate()?;
    let d = spec.depth();
    let (eps, chi, delta) = (params.eps, params.chi, params.delta);
    let slack = params.form.slack(delta);
    let s2 = fanout_constants(spec).s2;
    let tm = step_magnitudes(spec, step, StepVariant::Canonical { delta })?;
    let t_top = tm.inf_sq(d - 1);
    if !(t_top > 0.0) {
        return Err(Error::Degenerate("output-layer step is zero, so nu is undefined".into()));
    }
    for j in 1..d {
        if !(step.layers[j].w.frob_sq() > 0.0) {
            return Err(Error::TrivialLayer { layer: j });
        }
    }

    // Output-layer cap and ε_ψ.
    let b2_top = (1.0 - chi) * (1.0 - chi) * (1.0 - eps) * sqrt_roc(spec, d - 1) / s2[d - 1];
    if !(t_top < b2_top) {
        return Err(Error::StepCap { layer: d - 1, value: t_top, cap: b2_top });
    }
    // 1 − ε_ψ is formed directly to keep its relative precision for small steps.
    let keep_top = s2[d - 1] * t_top / ((1.0 - chi) * (1.0 - eps) * sqrt_roc(spec, d - 1));
    let eps_psi_top = 1.0 - keep_top;
    let x2 = keep_top / (1.0 - chi);
    let nu = 4.0 / t_top * kappa(x2)?;
    let nu_alt = 4.0 / t_top * keep_top * (1.0 - chi) / ((eps_psi_top - chi) * (eps_psi_top - chi));
    let eps_psi: Vec<f64> = (0..d).map(|j| libm::pow(chi, (d - 1 - j) as f64) * eps_psi_top).collect();

    // Backward ε_φ recursion and caps.
    let mut eps_phi = vec![0.0; d];
    let mut clamped = vec![false; d];
    eps_phi[d - 1] = eps;
    for j in (0..d - 1).rev() {
        let e = eps_psi[j];
        let num = e * (1.0 - eps_phi[j + 1]) * sqrt_roc(spec, j + 1) / ((1.0 - chi) * tm.inf_sq(j + 1)) - e / (1.0 - e) * s2[j + 1];
        let wd = &step.layers[j + 1].w;
        let wo = &w_o.layers[j + 1].w;
        let hn = spec.width(j + 1) as f64;
        let mut denom = f64::NEG_INFINITY;
        for i in 0..spec.width(j + 1) {
            let q = wd.col_norm_sq(i) / slack - wd.col_max_sq(i);
            if !(q > 0.0) {
                return Err(Error::Degenerate(format!(
                    "layer {} column {i}: step column is concentrated in one entry, so the eps_phi denominator vanishes; use a larger delta",
                    j + 1
                )));
            }
            denom = denom.max(wo.col_norm_sq(i) / (hn * q) + spec.width(j) as f64 / hn);
        }
        let arg = num / denom;
        if !(arg > 0.0) {
            return Err(Error::Degenerate(format!("eps_phi recursion at layer {j}: sigma-bar argument {arg} is not positive")));
        }
        let act = spec.activations[j];
        let top = sigma_bar(act, sigma_bar_domain(act), policy)?;
        let z = if arg >= top {
            clamped[j] = true;
            sigma_bar_domain(act)
        } else {
            sigma_bar_inv(act, arg, policy)?
        };
        let ep = 1.0 - z / sqrt_roc(spec, j);
        if !(ep < 1.0) {
            return Err(Error::Degenerate(format!("eps_phi recursion at layer {j}: eps_phi = {ep} is not below 1")));
        }
        eps_phi[j] = ep.max(0.0);
    }
    let mut caps = Vec::with_capacity(d);
    for j in 0..d {
        let cap = if j + 1 == d {
            b2_top
        } else {
            (1.0 - chi) * (1.0 - chi) * (1.0 - eps_psi[j]) * (1.0 - eps_phi[j]) * sqrt_roc(spec, j) / s2[j]
        };
        let value = tm.inf_sq(j);
        if !(value < cap) {
            return Err(Error::StepCap { layer: j, value, cap });
        }
        caps.push(CapRecord { layer: j, value, cap, margin: cap - value });
    }

    // Scale factors, resolved bottom-up so each ω uses the lower layer's Ψ norms.
    let mut scaling = ScalingConfig::uniform(spec, 1.0, 1.0, 1.0);
    let mut lower_norms: Vec<f64> = Vec::new();
    for j in 0..d {
        let l = &step.layers[j];
        if j > 0 {
            let mut omt = Mat::zeros(spec.in_width(j), spec.width(j));
            for i in 0..spec.width(j) {
                let col = l.w.col_norm_sq(i) / (1.0 - delta);
                for k in 0..spec.in_width(j) {
                    let v = col - l.w[(k, i)] * l.w[(k, i)];
                    if !(v > 0.0) {
                        return Err(Error::Degenerate(format!(
                            "shadow weight at layer {j} ({k}, {i}) is not positive: the step column is concentrated in one entry; use a larger delta"
                        )));
                    }
                    omt[(k, i)] = libm::sqrt(v);
                }
            }
            for (k, &n) in lower_norms.iter().enumerate() {
                if !(n > 0.0) {
                    return Err(Error::Degenerate(format!("layer {} neuron {k} has a zero step feature, so its shadow weight vanishes", j - 1)));
                }
            }
            scaling.omega[j] = lower_norms.iter().map(|n| libm::sqrt(*n)).collect();
            scaling.omega_tilde[j] = omt;
        }
        let mu2: Vec<f64> = if j + 1 == d {
            tm.t2[j]
                .iter()
                .map(|&t| if t > 0.0 { kappa_inv(t * nu / 4.0).map(|a| t / a) } else { Ok(4.0 / nu) })
                .collect::<Result<_>>()?
        } else {
            let c = step.layers[j + 1].w.frob_sq() / (1.0 - delta);
            tm.t2[j]
                .iter()
                .enumerate()
                .map(|(k, &t)| {
                    if t > c {
                        Ok(t * t / (t - c))
                    } else {
                        Err(Error::Degenerate(format!(
                            "scale factor denominator at layer {j} neuron {k} is not positive: T = {t} <= |W^[{}]|_F^2/(1-delta) = {c}",
                            j + 1
                        )))
                    }
                })
                .collect::<Result<_>>()?
        };
        scaling.mu[j] = mu2.iter().map(|m| libm::sqrt(*m)).collect();
        lower_norms = tm.t2[j].iter().zip(&mu2).map(|(t, m)| theta(t / m)).collect::<Result<_>>()?;
    }

    let lambda_value = lambda(params.eta, nu);
    Ok(CanonicalScalingResult {
        scaling,
        nu,
        nu_alt,
        eps_psi,
        eps_phi,
        eps_phi_clamped: clamped,
        caps,
        chi_residuals: chi_residuals(spec, step, chi, delta, params.form)?,
        numerators: tm.t2,
        lambda: lambda_value,
        lambda_normalised: 4.0 * params.eta / b2_top * lambda_value,
        x_top: libm::sqrt(x2),
        params,
    })
}

/// Outcome of [`verify_canonical`].
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalReport {
    /// `max |∂‖Ψ‖²/∂W_Δ − ν W_Δ| / max(|ν| ‖W_Δ‖_∞, floor)`.
    pub max_rel_deviation: f64,
    /// The same quantity restricted to each layer.
    pub layer_deviation: Vec<f64>,
    /// `‖Ψ(W_Δ)‖²_F` at the step.
    pub psi_norm_sq: f64,
    /// Certified cap `H^[D-1](1−ε_ψ)/ε_ψ`.
    pub psi_cap: f64,
    /// Whether `psi_norm_sq` respects `psi_cap`.
    pub psi_within_cap: bool,
    /// Cap implied by the construction itself, `H^[D-1] θ((1−ε_ψ)/(1−χ))`.
    pub psi_cap_construction: f64,
    /// `φ^[D-1] = H^[D-1] σ̄((1−ε)√ρ)`.
    pub phi_cap: f64,
    /// Data-feature checker verdict under the constructed scaling.
    pub phi_verdict: ConvergenceVerdict,
    /// Sampled data-feature norms, when samples were supplied and the checker passed.
    pub phi_certificate: Option<Certificate>,
}

/// Verifies the gradient identity `∂‖Ψ‖²/∂W_Δ = ν W_Δ` at the step and
/// certifies the feature-norm caps.
pub fn verify_canonical(
    spec: &NetworkSpec,
    w_o: &WeightState,
    step: &WeightStep,
    result: &CanonicalScalingResult,
    samples: &[Vec<f64>],
    policy: &TruncationPolicy,
) -> Result<CanonicalReport> {
    if !(result.nu.is_finite() && result.nu > 0.0) || !(step.max_abs() > 0.0) {
        return Err(Error::Degenerate("zero step: nu is undefined".into()));
    }
    let grad = psi_norm_sq_grad(spec, &result.scaling, step)?;
    let floor = f64::MIN_POSITIVE;
    let scale = (result.nu.abs() * step.max_abs()).max(floor);
    let layer_deviation: Vec<f64> = grad
        .layers
        .iter()
        .zip(&step.layers)
        .map(|(g, s)| {
            let dw = g.w.as_slice().iter().zip(s.w.as_slice()).map(|(a, b)| (a - result.nu * b).abs());
            let db = g.b.iter().zip(&s.b).map(|(a, b)| (a - result.nu * b).abs());
            dw.chain(db).fold(0.0f64, f64::max) / scale
        })
        .collect();
    let max_rel_deviation = layer_deviation.iter().copied().fold(0.0f64, f64::max);
    let d = spec.depth();
    let rec = psi_recursion(spec, &result.scaling, step)?;
    let psi_norm_sq: f64 = rec.norm[d - 1].iter().sum();
    let h = spec.width(d - 1) as f64;
    let e = result.eps_psi[d - 1];
    let psi_cap = h * (1.0 - e) / e;
    let psi_cap_construction = h * theta((1.0 - e) / (1.0 - result.params.chi))?;
    let profile = result.profile(spec, 0.5, policy)?;
    let phi_verdict = check_phi_convergence(spec, w_o, &result.scaling, &profile)?;
    // Sampling is only meaningful (and only guaranteed to stay inside the
    // radius of convergence) when the checker passes.
    let phi_certificate = if samples.is_empty() || !phi_verdict.pass {
        None
    } else {
        Some(phi_certificate(spec, w_o, &result.scaling, &profile, samples, policy)?)
    };
    Ok(CanonicalReport {
        max_rel_deviation,
        layer_deviation,
        psi_norm_sq,
        psi_cap,
        psi_within_cap: within(psi_norm_sq, psi_cap),
        psi_cap_construction,
        phi_cap: profile.phi_cap(spec),
        phi_verdict,
        phi_certificate,
    })
}

/// Outcome of [`solve_alpha_for_chi`].
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaSolution {
    /// Adjusted bias scales `α^[j]` for every layer (the output layer's is unchanged).
    pub alpha: Vec<f64>,
    /// Network spec carrying the adjusted `α`.
    pub spec: NetworkSpec,
    /// Back-propagation step recomputed under the adjusted `α`.
    pub step: WeightStep,
    /// Final relative χ-equality residuals.
    pub residuals: Vec<f64>,
    /// Gauss–Seidel sweeps performed.
    pub sweeps: usize,
}

/// Relative tolerance on the χ-equality residuals.
pub const CHI_TOLERANCE: f64 = 1e-10;

/// Adjusts the bias scales `α^[0..D-2]` so that the χ-equality
/// `‖W_Δ^[j+1]‖²_F = c χ ‖t^[j]‖²_∞` holds (with `c = 1−δ` for the proved form
/// and `1` for the summary form), recomputing the back-propagation step after
/// every trial value.
///
/// Each `α^[j]` is found by bracket expansion and bisection on
/// `[0, ∞)`; layers are swept bottom-up until every residual is below
/// [`CHI_TOLERANCE`].
pub fn solve_alpha_for_chi(
    spec: &NetworkSpec,
    w_o: &WeightState,
    data: &TrainingSet,
    eta: f64,
    chi: f64,
    delta: f64,
    form: CanonicalForm,
) -> Result<AlphaSolution> {
    spec.validate()?;
    open_unit("chi", chi)?;
    open_unit("delta", delta)?;
    let d = spec.depth();
    let c = form.slack(delta) * chi;
    let mut spec = spec.clone();
    let residual = |s: &NetworkSpec, j: usize| -> Result<(f64, WeightStep)> {
        let step = backprop_step(s, w_o, data, eta)?.step;
        let t = step_magnitudes(s, &step, StepVariant::Canonical { delta })?;
        let f = step.layers[j + 1].w.frob_sq();
        if !(f > 0.0) {
            return Err(Error::TrivialLayer { layer: j + 1 });
        }
        Ok(((c * t.inf_sq(j) - f) / f, step))
    };
    let all_residuals = |s: &NetworkSpec| -> Result<Vec<f64>> { (0..d - 1).map(|j| residual(s, j).map(|r| -r.0)).collect() };
    let max_sweeps = 50;
    for sweep in 0..=max_sweeps {
        let res = all_residuals(&spec)?;
        if res.iter().all(|r| r.abs() <= CHI_TOLERANCE) {
            let step = backprop_step(&spec, w_o, data, eta)?.step;
            return Ok(AlphaSolution { alpha: spec.alpha.clone(), spec, step, residuals: res, sweeps: sweep });
        }
        if sweep == max_sweeps {
            return Err(Error::NotConverged { order: sweep, tail: res.iter().fold(0.0f64, |m, r| m.max(r.abs())) });
        }
        for j in 0..d - 1 {
            if residual(&spec, j)?.0.abs() <= CHI_TOLERANCE {
                continue;
            }
            let err = core::cell::RefCell::new(None);
            let f = |a: f64| -> f64 {
                let mut s = spec.clone();
                s.alpha[j] = a;
                match residual(&s, j) {
                    Ok((r, _)) => r,
                    Err(e) => {
                        *err.borrow_mut() = Some(e);
                        0.0
                    }
                }
            };
            let flo = f(0.0);
            let mut hi = spec.alpha[j].max(1.0);
            let mut fhi = f(hi);
            let mut expansions = 0;
            while fhi < 0.0 && expansions < 60 {
                hi *= 2.0;
                fhi = f(hi);
                expansions += 1;
            }
            if let Some(e) = err.borrow_mut().take() {
                return Err(e);
            }
            if flo > 0.0 || fhi < 0.0 {
                return Err(Error::NoRoot { what: format!("alpha[{j}] for the chi-equality"), lo: 0.0, hi, flo, fhi });
            }
            let root = bisect(f, 0.0, hi, 1e-15 * hi, 400).expect("bracket has a sign change");
            if let Some(e) = err.into_inner() {
                return Err(e);
            }
            spec.alpha[j] = root;
        }
    }
    unreachable!("loop returns on the final sweep")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_lecun, Weights};
    use crate::series::theta_prime;
    use proptest::prelude::*;
    use rand_chacha::rand_core::{RngCore, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn unit(rng: &mut ChaCha20Rng) -> f64 {
        (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    fn data(n: usize, count: usize, m: usize, seed: u64) -> TrainingSet {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let inputs = (0..count).map(|_| (0..n).map(|_| 2.0 * unit(&mut rng) - 1.0).collect()).collect();
        let targets = (0..count).map(|_| (0..m).map(|_| 2.0 * unit(&mut rng) - 1.0).collect()).collect();
        TrainingSet::new(inputs, targets)
    }

    fn box_samples(n: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..count).map(|_| (0..n).map(|_| 2.0 * unit(&mut rng) - 1.0).collect()).collect()
    }

    fn profile(spec: &NetworkSpec, e_phi: f64, e_psi: f64) -> ConvergenceProfile {
        let d = spec.depth();
        ConvergenceProfile::new(spec, vec![e_phi; d], vec![e_psi; d], 0.2, 1e-3, 0.5, &TruncationPolicy::default()).unwrap()
    }

    /// LeCun weights with zero biases, so that `α` only scales the bias step.
    fn zero_bias_init(spec: &NetworkSpec, seed: u64) -> WeightState {
        let mut w = init_lecun(spec, seed);
        w.layers.iter_mut().for_each(|l| l.b.iter_mut().for_each(|b| *b = 0.0));
        w
    }

    /// Two-layer fixture whose step passes the canonical caps, if the seed allows it.
    fn canonical_fixture(seed: u64) -> Option<(NetworkSpec, WeightState, WeightStep, CanonicalScalingResult)> {
        let spec = NetworkSpec::tanh(2, vec![2, 1], vec![0.5, 0.5]).unwrap();
        let w_o = zero_bias_init(&spec, seed);
        let data = data(2, 4, 1, seed + 1000);
        let chi = 0.05;
        let sol = solve_alpha_for_chi(&spec, &w_o, &data, 1e-3, chi, 1e-3, CanonicalForm::Slackened).ok()?;
        let res = canonical_construct(&sol.spec, &w_o, &sol.step, CanonicalParams::new(0.1, chi, 1e-3)).ok()?;
        Some((sol.spec, w_o, sol.step, res))
    }

    #[test]
    fn profile_derived_quantities() {
        let spec = NetworkSpec::tanh(2, vec![2, 2], vec![0.5, 0.5]).unwrap();
        let p = profile(&spec, 0.3, 0.25);
        assert!((p.psi_over_h[0] - 3.0).abs() < 1e-15);
        assert!((p.lip_psi[1] - 16.0).abs() < 1e-12);
        assert!(p.step_bound_sq.iter().all(|b| *b > 0.0));
        assert!(ConvergenceProfile::new(&spec, vec![0.0, 0.3], vec![0.2; 2], 0.2, 1e-3, 0.5, &TruncationPolicy::default()).is_err());
    }

    #[test]
    fn tiny_scale_factors_pass_phi() {
        let spec = NetworkSpec::tanh(2, vec![2, 2], vec![0.5, 0.5]).unwrap();
        let w_o = init_lecun(&spec, 3);
        let v = check_phi_convergence(&spec, &w_o, &ScalingConfig::uniform(&spec, 1e-6, 1.0, 1.0), &profile(&spec, 0.3, 0.3)).unwrap();
        assert!(v.pass);
    }

    #[test]
    fn phi_layer_zero_boundary_passes_with_zero_margin() {
        let spec = NetworkSpec::tanh(2, vec![3], vec![0.5]).unwrap();
        let w_o = init_lecun(&spec, 4);
        let p = profile(&spec, 0.3, 0.3);
        let bound = (1.0 - 0.3) * libm::sqrt(spec.roc[0]) / fanout_constants(&spec).s2[0];
        let s = ScalingConfig::uniform(&spec, libm::sqrt(bound), 1.0, 1.0);
        let v = check_phi_convergence(&spec, &w_o, &s, &p).unwrap();
        assert!(v.pass);
        assert!(v.layers[0].margin.iter().all(|m| m.abs() <= 1e-14 * bound));
        let v2 = check_phi_convergence(&spec, &w_o, &s.with_mu_scaled(1.0 + 1e-9), &p).unwrap();
        assert!(!v2.pass);
    }

    #[test]
    fn phi_certificate_holds_for_passing_verdict() {
        let spec = NetworkSpec::tanh(2, vec![2, 2], vec![0.5, 0.5]).unwrap();
        let w_o = init_lecun(&spec, 5);
        let p = profile(&spec, 0.3, 0.3);
        let mut s = ScalingConfig::uniform(&spec, 1.0, 0.8, 1.1);
        let b = phi_mu_bounds(&spec, &w_o, &s, &p).unwrap();
        for j in 0..2 {
            s.mu[j] = b[j].iter().map(|v| libm::sqrt(*v)).collect();
        }
        assert!(check_phi_convergence(&spec, &w_o, &s, &p).unwrap().pass);
        let cert = phi_certificate(&spec, &w_o, &s, &p, &box_samples(2, 100, 9), &TruncationPolicy::default()).unwrap();
        assert!(cert.holds(), "{cert:?}");
        assert!(cert.max_value > 0.0);
    }

    #[test]
    fn zero_step_passes_psi() {
        let spec = NetworkSpec::tanh(2, vec![2, 2], vec![0.5, 0.5]).unwrap();
        let v = check_psi_convergence(&spec, &ScalingConfig::uniform(&spec, 1.0, 1.0, 1.0), &Weights::zeros(&spec), &profile(&spec, 0.3, 0.3)).unwrap();
        assert!(v.pass);
    }

    #[test]
    fn psi_verdict_flips_at_predicted_neuron() {
        let spec = NetworkSpec::tanh(2, vec![3], vec![0.5]).unwrap();
        let step = init_lecun(&spec, 11);
        let s = ScalingConfig { mu: vec![vec![1.0, 1.5, 0.7]], ..ScalingConfig::uniform(&spec, 1.0, 1.0, 1.0) };
        let p = profile(&spec, 0.3, 0.3);
        let t = step_magnitudes(&spec, &step, StepVariant::Plain).unwrap();
        // Analytic first violation: the neuron with the largest t²/μ².
        let ratios: Vec<f64> = (0..3).map(|i| t.t2[0][i] / (s.mu[0][i] * s.mu[0][i])).collect();
        let predicted = (0..3).max_by(|&a, &b| ratios[a].partial_cmp(&ratios[b]).unwrap()).unwrap();
        let critical = libm::sqrt(0.7 / ratios[predicted]);
        let fails = |k: f64| !check_psi_convergence(&spec, &s, &step.scaled(k), &p).unwrap().pass;
        let k = bisect(|k| if fails(k) { 1.0 } else { -1.0 }, 0.0, 10.0 * critical, 1e-14, 200).unwrap();
        assert!((k - critical).abs() <= 1e-9 * critical);
        let v = check_psi_convergence(&spec, &s, &step.scaled(k * (1.0 + 1e-8)), &p).unwrap();
        assert_eq!(v.first_failure(), Some((0, predicted)));
    }

    #[test]
    fn psi_certificate_holds_for_passing_steps() {
        let spec = NetworkSpec::tanh(2, vec![2, 2], vec![0.5, 0.5]).unwrap();
        let s = ScalingConfig::uniform(&spec, 1.0, 1.0, 0.3);
        let p = profile(&spec, 0.3, 0.3);
        let mut passing = Vec::new();
        for seed in 0..200 {
            let st = init_lecun(&spec, seed).scaled(0.05 + 0.002 * seed as f64);
            if check_psi_convergence(&spec, &s, &st, &p).unwrap().pass {
                passing.push(st);
            }
        }
        assert!(passing.len() >= 20);
        assert!(psi_certificate(&spec, &s, &passing, &p).unwrap().holds());
    }

    #[test]
    fn joint_midpoints_pass_both_checkers() {
        let spec = NetworkSpec::tanh(2, vec![3, 2], vec![0.5, 0.5]).unwrap();
        let w_o = init_lecun(&spec, 21);
        let step = backprop_step(&spec, &w_o, &data(2, 4, 2, 22), 1e-3).unwrap().step;
        let p = ConvergenceProfile::new(&spec, vec![0.2; 2], vec![0.99, 0.3], 0.2, 1e-3, 0.5, &TruncationPolicy::default()).unwrap();
        let rep = joint_convergence(&spec, &w_o, &step, &p).unwrap();
        for branch in [&rep.general, &rep.specialised] {
            let s = branch.scaling.as_ref().expect("feasible fixture");
            assert!(check_phi_convergence(&spec, &w_o, s, &branch.profile).unwrap().pass);
            assert!(check_psi_convergence(&spec, s, &step, &branch.profile).unwrap().pass);
        }
    }

    #[test]
    fn joint_reports_binding_step_cap() {
        let spec = NetworkSpec::tanh(2, vec![2, 2], vec![0.5, 0.5]).unwrap();
        let w_o = init_lecun(&spec, 23);
        let rep = joint_convergence(&spec, &w_o, &init_lecun(&spec, 24).scaled(50.0), &profile(&spec, 0.2, 0.5)).unwrap();
        assert!(matches!(rep.general.binding, Some(Binding::StepCap { layer: 0, .. })));
        assert!(rep.general.scaling.is_none());
    }

    #[test]
    fn specialised_bounds_match_general_checker() {
        // Under the specialised shadow weights the phi bound with the actual
        // weights is at least the closed-form upper end, and the lower end is
        // exactly the psi requirement.
        let spec = NetworkSpec::tanh(2, vec![3, 2], vec![0.5, 0.5]).unwrap();
        let p = ConvergenceProfile::new(&spec, vec![0.2; 2], vec![0.99, 0.3], 0.2, 1e-3, 0.5, &TruncationPolicy::default()).unwrap();
        let mut checked = 0;
        for seed in 20..40 {
            let w_o = init_lecun(&spec, seed);
            let step = backprop_step(&spec, &w_o, &data(2, 4, 2, seed + 1), 1e-3).unwrap().step;
            let br = joint_convergence(&spec, &w_o, &step, &p).unwrap().specialised;
            let Some(s) = br.scaling else { continue };
            let exact = phi_mu_bounds(&spec, &w_o, &s, &p).unwrap();
            let numer = psi_recursion(&spec, &s, &step).unwrap().numer;
            for (i, iv) in br.layers[1].mu_sq.iter().enumerate() {
                assert!(iv.hi <= exact[1][i] * (1.0 + 1e-12));
                assert!((iv.lo * (1.0 - 0.3) - numer[1][i]).abs() <= 1e-12 * numer[1][i]);
                let col = step.layers[1].w.col_norm_sq(i) / (1.0 - 1e-3);
                let closed = 2.0 * step.layers[1].b[i].powi(2) + step.layers[1].w.col_norm_sq(i) + 3.0 * col;
                assert!((numer[1][i] - closed).abs() <= 1e-12 * closed);
            }
            checked += 1;
        }
        assert!(checked >= 3, "only {checked} feasible fixtures");
    }

    #[test]
    fn eps_psi_recursion_matches_equivalent_form() {
        let spec = NetworkSpec::tanh(2, vec![2, 3], vec![0.5, 0.5]).unwrap();
        let w_o = init_lecun(&spec, 41);
        let p = profile(&spec, 0.2, 0.4);
        let e = eps_psi_recursion(&spec, &w_o, &p, &[1.0, 0.7]).unwrap();
        let x = 2.0 / 3.0 * p.phi_over_h[0] * w_o.layers[1].w.max_col_norm_sq() / (0.8 * libm::sqrt(spec.roc[1]));
        let psi_h = (1.0 - 0.5) * (1.0 - 0.4) * 0.7 / x;
        assert!(((1.0 - e[0]) / e[0] - psi_h).abs() <= 1e-12 * psi_h);
        assert_eq!(e[1], 0.4);
    }

    #[test]
    fn lambda_helpers() {
        assert_eq!(lambda_normalised(0.0).unwrap(), 1.0);
        assert_eq!(lambda_normalised(0.5).unwrap(), 0.5625);
        assert_eq!(lambda_normalised(1.0).unwrap(), 0.0);
        assert!(lambda_normalised(1.5).is_err());
        assert_eq!(lambda(0.2, 5.0), 1.0);
    }

    #[test]
    fn single_layer_bias_gradient_substitution() {
        let spec = NetworkSpec::tanh(2, vec![2], vec![0.7]).unwrap();
        let w_o = init_lecun(&spec, 50);
        let step = backprop_step(&spec, &w_o, &data(2, 3, 2, 51), 1e-3).unwrap().step;
        let res = canonical_construct(&spec, &w_o, &step, CanonicalParams::new(0.1, 0.2, 1e-3)).unwrap();
        for i in 0..2 {
            let t2 = res.numerators[0][i];
            let mu2 = res.scaling.mu[0][i] * res.scaling.mu[0][i];
            let g = theta_prime(t2 / mu2).unwrap() * 4.0 * step.layers[0].b[i] / mu2;
            assert!((g - res.nu * step.layers[0].b[i]).abs() <= 1e-10 * (res.nu * step.layers[0].b[i]).abs());
        }
    }

    #[test]
    fn canonical_identity_and_non_vacuity() {
        let mut found = 0;
        for seed in 0..40 {
            let Some((spec, w_o, step, res)) = canonical_fixture(seed) else { continue };
            assert!(res.max_chi_residual() <= 1e-9);
            let rep = verify_canonical(&spec, &w_o, &step, &res, &[], &TruncationPolicy::default()).unwrap();
            assert!(rep.max_rel_deviation <= 1e-8, "seed {seed}: {}", rep.max_rel_deviation);
            let mut bad = res.clone();
            let omt = &mut bad.scaling.omega_tilde[1];
            let at = (0..omt.as_slice().len()).max_by(|&a, &b| omt.as_slice()[a].total_cmp(&omt.as_slice()[b])).unwrap();
            omt.as_mut_slice()[at] *= 1.01;
            let rep_bad = verify_canonical(&spec, &w_o, &step, &bad, &[], &TruncationPolicy::default()).unwrap();
            assert!(rep_bad.max_rel_deviation >= 1e-4, "seed {seed}: {}", rep_bad.max_rel_deviation);
            found += 1;
        }
        assert!(found >= 3, "only {found} canonical fixtures");
    }

    #[test]
    fn zero_step_is_out_of_domain() {
        let spec = NetworkSpec::tanh(2, vec![2], vec![0.7]).unwrap();
        let w_o = init_lecun(&spec, 60);
        let r = canonical_construct(&spec, &w_o, &Weights::zeros(&spec), CanonicalParams::new(0.1, 0.2, 1e-3));
        assert!(matches!(r, Err(Error::Degenerate(_))));
    }

    #[test]
    fn oversized_step_names_layer() {
        let spec = NetworkSpec::tanh(2, vec![2], vec![0.7]).unwrap();
        let w_o = init_lecun(&spec, 61);
        let r = canonical_construct(&spec, &w_o, &init_lecun(&spec, 62), CanonicalParams::new(0.1, 0.2, 1e-3));
        assert!(matches!(r, Err(Error::StepCap { layer: 0, .. })));
    }

    #[test]
    fn alpha_solver_round_trip_and_fixed_point() {
        let spec = NetworkSpec::tanh(2, vec![2, 1], vec![0.5, 0.5]).unwrap();
        let mut solved = 0;
        for seed in 0..10 {
            let w_o = zero_bias_init(&spec, seed);
            let d = data(2, 4, 1, seed + 1000);
            let Ok(sol) = solve_alpha_for_chi(&spec, &w_o, &d, 1e-3, 0.05, 1e-3, CanonicalForm::Slackened) else { continue };
            let r = chi_residuals(&sol.spec, &sol.step, 0.05, 1e-3, CanonicalForm::Slackened).unwrap();
            assert!(r[0].abs() <= CHI_TOLERANCE);
            let again = solve_alpha_for_chi(&sol.spec, &w_o, &d, 1e-3, 0.05, 1e-3, CanonicalForm::Slackened).unwrap();
            assert_eq!(again.alpha, sol.alpha);
            assert_eq!(again.sweeps, 0);
            solved += 1;
        }
        assert!(solved >= 5, "only {solved} fixtures solved");
    }

    #[test]
    fn alpha_increases_step_magnitude() {
        let spec = NetworkSpec::tanh(2, vec![2, 1], vec![0.5, 0.5]).unwrap();
        let w_o = zero_bias_init(&spec, 3);
        let d = data(2, 4, 1, 4);
        let mut last = 0.0;
        for a in [0.1, 0.5, 1.0, 2.0, 4.0] {
            let s = NetworkSpec { alpha: vec![a, 0.5], ..spec.clone() };
            let st = backprop_step(&s, &w_o, &d, 1e-3).unwrap().step;
            let t = step_magnitudes(&s, &st, StepVariant::Canonical { delta: 1e-3 }).unwrap().inf_sq(0);
            assert!(t > last);
            last = t;
        }
    }

    proptest! {
        /// Both forms of ν agree.
        #[test]
        fn nu_forms_agree(t in 1e-6f64..1.0, eps_psi in 0.3f64..0.99, chi in 0.01f64..0.29) {
            let a = 4.0 / t * kappa((1.0 - eps_psi) / (1.0 - chi)).unwrap();
            let b = 4.0 / t * (1.0 - eps_psi) * (1.0 - chi) / ((eps_psi - chi) * (eps_psi - chi));
            prop_assert!((a - b).abs() <= 1e-12 * a.abs());
        }

        /// λ' = 4η λ/B² equals (1 − (‖t‖/B)²)² for any admissible output step.
        #[test]
        fn lambda_normalised_matches_curve(scale in 1e-4f64..0.5, seed in 0u64..50) {
            let spec = NetworkSpec::tanh(2, vec![2], vec![0.7]).unwrap();
            let w_o = init_lecun(&spec, seed);
            let step = init_lecun(&spec, seed + 100).scaled(scale);
            if let Ok(res) = canonical_construct(&spec, &w_o, &step, CanonicalParams::new(0.1, 0.2, 1e-3)) {
                let c = res.caps[0];
                let x = libm::sqrt(c.value / c.cap);
                prop_assert!((res.lambda_normalised - lambda_normalised(x).unwrap()).abs() <= 1e-12);
            }
        }

        /// λ(2η) = λ(η)/2.
        #[test]
        fn lambda_inverse_in_eta(eta in 1e-6f64..1.0, nu in 1e-3f64..1e6) {
            prop_assert_eq!(lambda(2.0 * eta, nu), lambda(eta, nu) / 2.0);
        }

        /// λ' is strictly decreasing on (0, 1).
        #[test]
        fn lambda_normalised_decreasing(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            prop_assume!(a < b);
            prop_assert!(lambda_normalised(a).unwrap() > lambda_normalised(b).unwrap());
        }

        /// Shrinking the step never shrinks an admissible μ interval of the
        /// general construction.
        #[test]
        fn joint_intervals_monotone_in_step(seed in 0u64..30) {
            let spec = NetworkSpec::tanh(2, vec![3, 2], vec![0.5, 0.5]).unwrap();
            let w_o = init_lecun(&spec, seed);
            let step = backprop_step(&spec, &w_o, &data(2, 4, 2, seed + 7), 1e-3).unwrap().step;
            let p = profile(&spec, 0.2, 0.5);
            let big = joint_convergence(&spec, &w_o, &step, &p).unwrap().general;
            let small = joint_convergence(&spec, &w_o, &step.scaled(0.1), &p).unwrap().general;
            prop_assert!(small.layers.len() >= big.layers.len());
            for (lb, ls) in big.layers.iter().zip(&small.layers) {
                for (ib, is) in lb.mu_sq.iter().zip(&ls.mu_sq) {
                    prop_assert!(is.lo <= ib.lo && is.hi >= ib.hi);
                }
            }
        }
    }
}
