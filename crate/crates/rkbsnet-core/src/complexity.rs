//! Rademacher-complexity bounds for the class of output changes reachable by
//! one back-propagation step, for a sequence of steps, and for the closed-form
//! two-layer tanh example.
//!
//! For a step whose output-layer magnitude satisfies `‖t‖²_∞ < B²`, with
//! `B² = (1−χ)²(1−ε)√ρ/s^[D-1]²`, the per-step bound is
//!
//! ```text
//! R_N ≤ H^[D-1] √( σ̄((1−ε)√ρ)/N · ‖t‖²_∞ / (B²/(1−χ) − ‖t‖²_∞) )
//! ```
//!
//! and a `T`-step training run is bounded by the sum of its per-step bounds.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::{fanout_constants, step_magnitudes, StepVariant};
use crate::net::{NetworkSpec, WeightStep};
use crate::series::{sigma_bar, TruncationPolicy};

fn open_unit(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::Parameter { name, value: v, why: "must lie strictly inside (0, 1)" })
    }
}

fn positive(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter { name, value: v, why: "must be positive and finite" })
    }
}

/// Per-step bound from its scalar ingredients:
/// `h √( (σ̄/N) t² / (B²/(1−χ) − t²) )`.
///
/// Fails when `t² ≥ B²/(1−χ)`, where the bound is meaningless.
pub fn step_bound_value(h: f64, sigma_bar_value: f64, n: f64, t_inf_sq: f64, b_sq: f64, chi: f64) -> Result<f64> {
    positive("N", n)?;
    open_unit("chi", chi)?;
    let room = b_sq / (1.0 - chi) - t_inf_sq;
    if !(room > 0.0) {
        return Err(Error::Range { func: "rademacher step bound", value: t_inf_sq, lo: 0.0, hi: b_sq / (1.0 - chi) });
    }
    Ok(h * libm::sqrt(sigma_bar_value / n * t_inf_sq / room))
}

/// Small-step form of the per-step bound: `h √(σ̄/N) ‖t‖_∞ √(1−χ)/B`.
pub fn step_bound_small_eta(h: f64, sigma_bar_value: f64, n: f64, t_inf: f64, b: f64, chi: f64) -> f64 {
    h * libm::sqrt(sigma_bar_value / n) * t_inf * libm::sqrt(1.0 - chi) / b
}

/// Ingredients and value of a Rademacher-complexity bound.
#[derive(Debug, Clone, PartialEq)]
pub struct RademacherReport {
    /// Per-step bound values.
    pub step_bounds: Vec<f64>,
    /// Sum of `step_bounds`.
    pub cumulative: f64,
    /// Sample count `N`.
    pub n: f64,
    /// Output-layer data budget `ε`.
    pub eps: f64,
    /// Step ratio `χ`.
    pub chi: f64,
    /// `‖t^[D-1]‖_∞` per step.
    pub t_inf: Vec<f64>,
    /// `B^[D-1]`.
    pub b: f64,
    /// `σ̄((1−ε)√ρ)`.
    pub sigma_bar: f64,
    /// Output width `H^[D-1]`.
    pub width: f64,
    /// Small-step approximation of each per-step bound.
    pub small_eta: Vec<f64>,
}

/// Output-layer cap `B^[D-1]² = (1−χ)²(1−ε)√ρ/s^[D-1]²`.
pub fn output_step_cap_sq(spec: &NetworkSpec, eps: f64, chi: f64) -> Result<f64> {
    spec.validate()?;
    open_unit("eps", eps)?;
    open_unit("chi", chi)?;
    let d = spec.depth();
    let s2 = fanout_constants(spec).s2[d - 1];
    Ok((1.0 - chi) * (1.0 - chi) * (1.0 - eps) * libm::sqrt(spec.roc[d - 1]) / s2)
}

/// Per-step bound for a back-propagation step.
///
/// The output-layer magnitude uses the canonical numerator with slack `δ`.
/// Fails with [`Error::StepCap`] when the step violates `‖t^[D-1]‖²_∞ < B²`.
pub fn rademacher_step_bound(spec: &NetworkSpec, step: &WeightStep, eps: f64, chi: f64, delta: f64, n: usize) -> Result<RademacherReport> {
    rademacher_bound(spec, core::slice::from_ref(step), eps, chi, delta, n)
}

/// Per-step bounds and their sum for a sequence of steps.
pub fn rademacher_bound(spec: &NetworkSpec, steps: &[WeightStep], eps: f64, chi: f64, delta: f64, n: usize) -> Result<RademacherReport> {
    if steps.is_empty() {
        return Err(Error::Degenerate("no steps supplied".into()));
    }
    let b_sq = output_step_cap_sq(spec, eps, chi)?;
    let d = spec.depth();
    let act = spec.activations[d - 1];
    let sb = sigma_bar(act, (1.0 - eps) * libm::sqrt(spec.roc[d - 1]), &TruncationPolicy::default())?;
    let h = spec.width(d - 1) as f64;
    let nf = n as f64;
    let (mut step_bounds, mut t_inf, mut small_eta) = (Vec::new(), Vec::new(), Vec::new());
    for step in steps {
        let t2 = step_magnitudes(spec, step, StepVariant::Canonical { delta })?.inf_sq(d - 1);
        if !(t2 < b_sq) {
            return Err(Error::StepCap { layer: d - 1, value: t2, cap: b_sq });
        }
        step_bounds.push(step_bound_value(h, sb, nf, t2, b_sq, chi)?);
        t_inf.push(libm::sqrt(t2));
        small_eta.push(step_bound_small_eta(h, sb, nf, libm::sqrt(t2), libm::sqrt(b_sq), chi));
    }
    let cumulative = rademacher_training_bound(&step_bounds)?;
    Ok(RademacherReport { step_bounds, cumulative, n: nf, eps, chi, t_inf, b: libm::sqrt(b_sq), sigma_bar: sb, width: h, small_eta })
}

/// Bound for a training run: the sum of the per-step bounds.
pub fn rademacher_training_bound(per_step: &[f64]) -> Result<f64> {
    if per_step.is_empty() {
        return Err(Error::Degenerate("training bound needs at least one step".into()));
    }
    Ok(per_step.iter().sum())
}

/// Inputs of the closed-form two-layer, scalar-output tanh example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoLayerExample {
    /// Hidden width `H^[0]`.
    pub h0: f64,
    /// Training-set size `N`.
    pub n: f64,
    /// Loss Lipschitz constant `L_E`.
    pub lipschitz: f64,
    /// Hidden-layer bias scale `α^[0]`.
    pub alpha0: f64,
    /// Output-layer bias scale `α^[1]`.
    pub alpha1: f64,
    /// Learning-rate multiplier `s`, with `0 < s ≪ 1`.
    pub s: f64,
    /// Number of steps `T`.
    pub steps: f64,
    /// `‖W_O^[1]‖_F`.
    pub w1_frob: f64,
    /// Output-layer data budget `ε`.
    pub eps: f64,
    /// Step ratio `χ`.
    pub chi: f64,
}

/// Evaluated closed forms of the two-layer example.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerReport {
    /// Prescribed learning rate
    /// `η = s(1−χ)/(N L_E √(2(1+α1²))) · √((1−ε)√(π/2)/(½α1²+H0))`.
    pub eta: f64,
    /// `‖t^[0]‖²_∞ ≤ 2η²N²L_E²‖W_O^[1]‖²_F(1+α0²)`.
    pub t0_sq_bound: f64,
    /// `‖t^[1]‖²_∞ ≤ 2η²N²L_E²(1+α1²)`.
    pub t1_sq_bound: f64,
    /// `B^[1]² = (1−χ)²(1−ε)√(π/2)/(½α1²+H0)`.
    pub b1_sq: f64,
    /// `σ̄((1−ε)√(π/2))`.
    pub sigma_bar: f64,
    /// Displayed `T`-step bound
    /// `sT √(2σ̄/N) (1−χ)²(1−ε)√(π/2)/(½α1²+H0)`.
    pub final_bound: f64,
    /// `T` times the per-step bound evaluated at the `‖t^[1]‖²_∞` bound.
    pub final_bound_direct: f64,
}

/// Evaluates the closed forms of the two-layer tanh example.
pub fn two_layer_tanh_example(ex: &TwoLayerExample) -> Result<TwoLayerReport> {
    for (name, v) in [("H0", ex.h0), ("N", ex.n), ("L_E", ex.lipschitz), ("s", ex.s), ("T", ex.steps), ("|W1|_F", ex.w1_frob)] {
        positive(name, v)?;
    }
    for (name, v) in [("alpha0", ex.alpha0), ("alpha1", ex.alpha1)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::Parameter { name, value: v, why: "must be non-negative and finite" });
        }
    }
    open_unit("eps", ex.eps)?;
    open_unit("chi", ex.chi)?;
    let rho_root = libm::sqrt(core::f64::consts::FRAC_PI_2);
    let s1 = 0.5 * ex.alpha1 * ex.alpha1 + ex.h0;
    let inner = (1.0 - ex.eps) * rho_root / s1;
    let eta = ex.s * (1.0 - ex.chi) / (ex.n * ex.lipschitz * libm::sqrt(2.0 * (1.0 + ex.alpha1 * ex.alpha1))) * libm::sqrt(inner);
    let common = 2.0 * eta * eta * ex.n * ex.n * ex.lipschitz * ex.lipschitz;
    let t0_sq_bound = common * ex.w1_frob * ex.w1_frob * (1.0 + ex.alpha0 * ex.alpha0);
    let t1_sq_bound = common * (1.0 + ex.alpha1 * ex.alpha1);
    let b1_sq = (1.0 - ex.chi) * (1.0 - ex.chi) * inner;
    let sb = sigma_bar(crate::net::Activation::Tanh, (1.0 - ex.eps) * rho_root, &TruncationPolicy::default())?;
    let final_bound = ex.s * ex.steps * libm::sqrt(2.0 * sb / ex.n) * b1_sq;
    let final_bound_direct = ex.steps * step_bound_value(1.0, sb, ex.n, t1_sq_bound, b1_sq, ex.chi)?;
    Ok(TwoLayerReport { eta, t0_sq_bound, t1_sq_bound, b1_sq, sigma_bar: sb, final_bound, final_bound_direct })
}
