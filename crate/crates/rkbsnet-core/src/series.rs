//! Scalar helper functions and power-series machinery.
//!
//! * the geometric family `θ(ζ) = ζ/(1−ζ)`, its inverse and derivative, and
//!   `κ(ζ) = ζ/(1−ζ)²`;
//! * Taylor coefficients `c_l(z) = τ^(l)(z)/l!` of the activation about an
//!   arbitrary centre, including a closed-form pole-sum for tanh;
//! * the coefficient-weighted series `σ_{z,z'}(ζ) = Σ_l c_l(z) c_l(z') ζ^l`,
//!   its envelope `σ̄(ζ) = max_{z≥0} σ_{z,z}(ζ)` and the inverse of `σ̄`.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::{FRAC_PI_2, PI};

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::net::Activation;
use crate::scalar::{bisect, golden_max};

/// `θ(ζ) = ζ/(1−ζ)` for `ζ < 1`.
pub fn theta(z: f64) -> Result<f64> {
    if !(z < 1.0) {
        return Err(Error::Domain { func: "theta", arg: z });
    }
    Ok(z / (1.0 - z))
}

/// `θ⁻¹(y) = y/(1+y)` for `y > −1`.
pub fn theta_inv(y: f64) -> Result<f64> {
    if !(y > -1.0) {
        return Err(Error::Domain { func: "theta_inv", arg: y });
    }
    Ok(y / (1.0 + y))
}

/// `θ'(ζ) = 1/(1−ζ)²` for `ζ < 1`.
pub fn theta_prime(z: f64) -> Result<f64> {
    if !(z < 1.0) {
        return Err(Error::Domain { func: "theta_prime", arg: z });
    }
    Ok(1.0 / ((1.0 - z) * (1.0 - z)))
}

/// Inverse of `θ'` on `ζ < 1`: `1 − 1/√y` for `y > 0`.
pub fn theta_prime_inv(y: f64) -> Result<f64> {
    if !(y > 0.0) || !y.is_finite() {
        return Err(Error::Domain { func: "theta_prime_inv", arg: y });
    }
    Ok(1.0 - 1.0 / libm::sqrt(y))
}

/// `κ(ζ) = ζ/(1−ζ)² = ζ θ'(ζ)` for `ζ < 1`.
pub fn kappa(z: f64) -> Result<f64> {
    if !(z < 1.0) {
        return Err(Error::Domain { func: "kappa", arg: z });
    }
    Ok(z / ((1.0 - z) * (1.0 - z)))
}

/// Inverse of `κ` on `[0, 1)`: `(2y+1−√(4y+1))/(2y)` for `y ≥ 0`.
///
/// Evaluated in the cancellation-free form `2y/(2y+1+√(4y+1))`.
pub fn kappa_inv(y: f64) -> Result<f64> {
    if !(y >= 0.0) || !y.is_finite() {
        return Err(Error::Domain { func: "kappa_inv", arg: y });
    }
    Ok(2.0 * y / (2.0 * y + 1.0 + libm::sqrt(4.0 * y + 1.0)))
}

/// Truncation and domain policy for every power-series evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationPolicy {
    /// Series order `L` (the minimum order when `adaptive`).
    pub order: usize,
    /// Absolute tail tolerance for adaptive evaluation.
    pub tolerance: f64,
    /// Guard factor in `(0, 1)`: series arguments must satisfy `|ζ| ≤ guard·ρ²`.
    pub guard: f64,
    /// Largest order an adaptive evaluation may reach.
    pub max_order: usize,
    /// When `false`, exactly `order` terms are summed with no tail check.
    pub adaptive: bool,
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        Self { order: 16, tolerance: 1e-12, guard: 0.9, max_order: 640, adaptive: true }
    }
}

impl TruncationPolicy {
    /// Fixed-order policy summing exactly `order` terms.
    pub fn fixed(order: usize) -> Self {
        Self { order, adaptive: false, ..Self::default() }
    }

    /// Checks `L ≥ 2`, `tolerance > 0` and `guard ∈ (0, 1)`.
    pub fn validate(&self) -> Result<()> {
        if self.order < 2 {
            return Err(Error::Parameter { name: "order", value: self.order as f64, why: "must be at least 2" });
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Parameter { name: "tolerance", value: self.tolerance, why: "must be positive" });
        }
        if !(self.guard > 0.0 && self.guard < 1.0) {
            return Err(Error::Parameter { name: "guard", value: self.guard, why: "must lie in (0, 1)" });
        }
        if self.max_order < self.order {
            return Err(Error::Parameter { name: "max_order", value: self.max_order as f64, why: "must be at least order" });
        }
        Ok(())
    }
}

/// Taylor coefficients `c_1..c_L` of an activation about a centre `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesCoeffs {
    /// Expansion centre.
    pub center: f64,
    /// `coeffs[l-1] = c_l = τ^(l)(z)/l!`.
    pub coeffs: Vec<f64>,
    /// Activation the coefficients belong to.
    pub activation: Activation,
}

impl SeriesCoeffs {
    /// Order `L`.
    pub fn order(&self) -> usize {
        self.coeffs.len()
    }

    /// `c_l` for `1 ≤ l ≤ L`.
    pub fn c(&self, l: usize) -> f64 {
        self.coeffs[l - 1]
    }

    /// Largest `|c_l| ρ^l` over the last two orders: a decay diagnostic that must
    /// be small inside the radius of convergence.
    pub fn tail_indicator(&self, radius: f64) -> f64 {
        let l = self.order();
        (l.saturating_sub(1).max(1)..=l).map(|k| self.c(k).abs() * libm::pow(radius, k as f64)).fold(0.0, f64::max)
    }
}

/// Taylor coefficients `a_0..a_L` of `tanh(z + h)` in `h`.
///
/// Uses the Taylor-mode form of `τ' = 1 − τ²`:
/// `(k+1) a_{k+1} = [k = 0] − Σ_{i=0}^{k} a_i a_{k−i}`. This is the polynomial-in-tanh
/// derivative recurrence collected by order, so each coefficient is a polynomial
/// in `tanh z` evaluated without forming derivatives explicitly.
pub fn tanh_taylor(z: f64, order: usize) -> Vec<f64> {
    let mut a = vec![0.0; order + 1];
    a[0] = libm::tanh(z);
    for k in 0..order {
        let conv: f64 = (0..=k).map(|i| a[i] * a[k - i]).sum();
        let unit = if k == 0 { 1.0 } else { 0.0 };
        a[k + 1] = (unit - conv) / (k + 1) as f64;
    }
    a
}

/// Coefficients `c_l = τ^(l)(z)/l!`, `l = 1..=order`.
pub fn act_deriv_coeffs(activation: Activation, z: f64, order: usize) -> Result<SeriesCoeffs> {
    if order < 1 {
        return Err(Error::Parameter { name: "order", value: 0.0, why: "must be at least 1" });
    }
    let coeffs = match activation {
        Activation::Tanh => tanh_taylor(z, order)[1..].to_vec(),
    };
    Ok(SeriesCoeffs { center: z, coeffs, activation })
}

fn closed_form_sign(z: f64, m: usize) -> f64 {
    let s = if z < 0.0 { -1.0 } else { 1.0 };
    let inner = if m % 2 == 0 { 1.0 } else { -s };
    2.0 * s * inner
}

/// Pole-sum expression for the `m`-th Taylor coefficient of tanh about `z`,
/// truncated to `n_terms` poles:
///
/// ```text
/// 2 sgn(z) (−sgn z)^m Σ_{n<n_terms} (z² + ((n+½)π)²)^{−(m+1)/2} cos((m+1) atan((n+½)π/|z|))
/// ```
///
/// At `z = 0` the `z → 0⁺` limit is used (`atan → π/2`, with exact cosines).
/// The sum converges like `n_terms^{−m}`; see [`tanh_coeff_closed_form_tail`].
pub fn tanh_coeff_closed_form(z: f64, m: usize, n_terms: usize) -> f64 {
    let s = (m + 1) as f64;
    let az = z.abs();
    let exact_cos = [1.0, 0.0, -1.0, 0.0][(m + 1) % 4];
    let mut sum = 0.0;
    for n in 0..n_terms {
        let c = (n as f64 + 0.5) * PI;
        let r2 = az * az + c * c;
        let cosv = if az == 0.0 { exact_cos } else { libm::cos(s * libm::atan(c / az)) };
        sum += libm::pow(r2, -0.5 * s) * cosv;
    }
    closed_form_sign(z, m) * sum
}

/// [`tanh_coeff_closed_form`] plus an Euler–Maclaurin estimate of the omitted
/// poles `n ≥ n_terms`.
///
/// Each pole term is `Re (|z| + iπ(n+½))^{−(m+1)} = Re (iπ)^{−(m+1)} (n+a)^{−(m+1)}`
/// with `a = ½ − i|z|/π`; the tail of the Hurwitz-type sum is integrated with
/// five Bernoulli corrections. Requires `n_terms ≥ 8` for the expansion to be
/// accurate.
pub fn tanh_coeff_closed_form_tail(z: f64, m: usize, n_terms: usize) -> f64 {
    const B2K: [f64; 5] = [1.0 / 6.0, -1.0 / 30.0, 1.0 / 42.0, -1.0 / 30.0, 5.0 / 66.0];
    let s = (m + 1) as i32;
    let a = Complex64::new(0.5, -z.abs() / PI);
    let x = Complex64::new(n_terms as f64, 0.0) + a;
    let mut tail = x.powi(1 - s) / (s - 1) as f64 + 0.5 * x.powi(-s);
    let mut fact = 1.0; // (2k)!
    let mut rising = s as f64; // (s)_{2k−1}
    for (k, b) in B2K.iter().enumerate() {
        let k = k + 1;
        fact *= ((2 * k - 1) * 2 * k) as f64;
        if k > 1 {
            rising *= (s as f64 + (2 * k - 3) as f64) * (s as f64 + (2 * k - 2) as f64);
        }
        tail += x.powi(-s - 2 * k as i32 + 1) * (b / fact * rising);
    }
    let pref = Complex64::new(0.0, PI).powi(-s);
    tanh_coeff_closed_form(z, m, n_terms) + closed_form_sign(z, m) * (pref * tail).re
}

/// Value and partial derivatives of `σ_{z,z'}(ζ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaEval {
    /// `σ_{z,z'}(ζ)`.
    pub value: f64,
    /// `∂σ/∂ζ`.
    pub d_zeta: f64,
    /// `∂σ/∂z` (first centre).
    pub d_z: f64,
    /// `∂σ/∂z'` (second centre).
    pub d_z2: f64,
    /// Number of terms summed.
    pub order: usize,
}

/// Distance from a real centre to the nearest singularity of the activation.
fn singularity_distance(activation: Activation, z: f64) -> f64 {
    let r = activation.roc();
    libm::sqrt(z * z + r * r)
}

fn check_guard(activation: Activation, zeta: f64, policy: &TruncationPolicy) -> Result<()> {
    let r = activation.roc();
    let limit = policy.guard * r * r;
    if !(zeta.abs() <= limit) {
        return Err(Error::RocBreach { layer: 0, i: 0, i2: 0, arg: zeta, limit });
    }
    Ok(())
}

/// `σ_{z,z'}(ζ)` with its partial derivatives.
///
/// Errors with [`Error::RocBreach`] (layer and neuron fields zeroed; callers
/// re-label them) when `|ζ| > guard·ρ²`.
pub fn sigma_eval(activation: Activation, z: f64, z2: f64, zeta: f64, policy: &TruncationPolicy) -> Result<SigmaEval> {
    check_guard(activation, zeta, policy)?;
    let q = zeta.abs() / (singularity_distance(activation, z) * singularity_distance(activation, z2));
    let mut order = policy.order.max(1);
    loop {
        let a = act_deriv_coeffs(activation, z, order + 1)?.coeffs;
        let b = act_deriv_coeffs(activation, z2, order + 1)?.coeffs;
        let (mut value, mut d_zeta, mut d_z, mut d_z2) = (0.0, 0.0, 0.0, 0.0);
        let mut pow_prev = 1.0; // ζ^{l−1}
        let mut last = [0.0f64; 2];
        for l in 1..=order {
            let pow = pow_prev * zeta;
            let (cl, cl2) = (a[l - 1], b[l - 1]);
            let term = cl * cl2 * pow;
            value += term;
            d_zeta += l as f64 * cl * cl2 * pow_prev;
            d_z += (l + 1) as f64 * a[l] * cl2 * pow;
            d_z2 += (l + 1) as f64 * cl * b[l] * pow;
            last = [last[1], term];
            pow_prev = pow;
        }
        if !policy.adaptive {
            return Ok(SigmaEval { value, d_zeta, d_z, d_z2, order });
        }
        let tail = if q < 1.0 { (last[0].abs() + last[1].abs()) * q / (1.0 - q) } else { f64::INFINITY };
        if tail <= policy.tolerance {
            return Ok(SigmaEval { value, d_zeta, d_z, d_z2, order });
        }
        if order >= policy.max_order {
            return Err(Error::NotConverged { order, tail });
        }
        order = (2 * order).min(policy.max_order);
    }
}

/// `σ_{z,z'}(ζ) = Σ_l c_l(z) c_l(z') ζ^l`.
pub fn sigma(activation: Activation, z: f64, z2: f64, zeta: f64, policy: &TruncationPolicy) -> Result<f64> {
    Ok(sigma_eval(activation, z, z2, zeta, policy)?.value)
}

/// Upper end of the argument range used with `σ̄`: `√ρ`.
pub fn sigma_bar_domain(activation: Activation) -> f64 {
    libm::sqrt(activation.roc())
}

const SIGMA_BAR_ZMAX: f64 = 10.0;
const SIGMA_BAR_GRID: usize = 256;

/// `σ̄(ζ)` together with the maximising centre `z* ∈ [0, 10]`.
pub fn sigma_bar_argmax(activation: Activation, zeta: f64, policy: &TruncationPolicy) -> Result<(f64, f64)> {
    let hi = sigma_bar_domain(activation);
    if !(zeta >= 0.0 && zeta <= hi) {
        return Err(Error::Domain { func: "sigma_bar", arg: zeta });
    }
    if zeta == 0.0 {
        return Ok((0.0, 0.0));
    }
    let step = SIGMA_BAR_ZMAX / (SIGMA_BAR_GRID - 1) as f64;
    let mut best = (0usize, f64::NEG_INFINITY);
    for k in 0..SIGMA_BAR_GRID {
        let v = sigma(activation, k as f64 * step, k as f64 * step, zeta, policy)?;
        if v > best.1 {
            best = (k, v);
        }
    }
    let lo = best.0.saturating_sub(1) as f64 * step;
    let up = ((best.0 + 1).min(SIGMA_BAR_GRID - 1)) as f64 * step;
    let mut err = None;
    let (zr, vr) = golden_max(
        |z| match sigma(activation, z, z, zeta, policy) {
            Ok(v) => v,
            Err(e) => {
                err = Some(e);
                f64::NEG_INFINITY
            }
        },
        lo,
        up,
        80,
    );
    if let Some(e) = err {
        return Err(e);
    }
    // Accept the refinement only when it beats the grid by more than rounding.
    if vr > best.1 + 1e-14 * best.1.abs() {
        Ok((vr, zr))
    } else {
        Ok((best.1, best.0 as f64 * step))
    }
}

/// `σ̄(ζ) = max_{z ≥ 0} σ_{z,z}(ζ)` for `ζ ∈ [0, √ρ]`.
pub fn sigma_bar(activation: Activation, zeta: f64, policy: &TruncationPolicy) -> Result<f64> {
    Ok(sigma_bar_argmax(activation, zeta, policy)?.0)
}

/// `dσ̄/dζ`: by the envelope theorem, `∂σ_{z*,z*}/∂ζ` at the maximiser.
pub fn sigma_bar_deriv(activation: Activation, zeta: f64, policy: &TruncationPolicy) -> Result<f64> {
    let (_, z) = sigma_bar_argmax(activation, zeta, policy)?;
    Ok(sigma_eval(activation, z, z, zeta, policy)?.d_zeta)
}

/// `σ̄⁻¹(y)` by bisection on `[0, √ρ]`, to an absolute tolerance of `1e-12`.
pub fn sigma_bar_inv(activation: Activation, y: f64, policy: &TruncationPolicy) -> Result<f64> {
    let hi = sigma_bar_domain(activation);
    let top = sigma_bar(activation, hi, policy)?;
    if !(y >= 0.0 && y <= top) {
        return Err(Error::Range { func: "sigma_bar_inv", value: y, lo: 0.0, hi: top });
    }
    let mut err = None;
    let root = bisect(
        |z| match sigma_bar(activation, z, policy) {
            Ok(v) => v - y,
            Err(e) => {
                err = Some(e);
                0.0
            }
        },
        0.0,
        hi,
        1e-13,
        200,
    );
    if let Some(e) = err {
        return Err(e);
    }
    root.ok_or(Error::Range { func: "sigma_bar_inv", value: y, lo: 0.0, hi: top })
}

/// Guarded series limit `guard·ρ²` for an activation.
pub fn series_limit(activation: Activation, policy: &TruncationPolicy) -> f64 {
    policy.guard * activation.roc() * activation.roc()
}

/// Radius of convergence of tanh about any real centre.
pub const TANH_ROC: f64 = FRAC_PI_2;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Independent oracle: `P_0(t) = t`, `P_{k+1}(t) = P_k'(t)(1 − t²)`, so that
    /// `tanh^(k)(z) = P_k(tanh z)`. Polynomials are held as coefficient vectors.
    fn poly_derivs(z: f64, order: usize) -> Vec<f64> {
        let t = libm::tanh(z);
        let mut p: Vec<f64> = vec![0.0, 1.0];
        let mut out = Vec::new();
        let mut fact = 1.0;
        for k in 1..=order {
            let dp: Vec<f64> = (1..p.len()).map(|i| i as f64 * p[i]).collect();
            let mut next = vec![0.0; dp.len() + 2];
            for (i, c) in dp.iter().enumerate() {
                next[i] += c;
                next[i + 2] -= c;
            }
            p = next;
            fact *= k as f64;
            let val: f64 = p.iter().rev().fold(0.0, |acc, c| acc * t + c);
            out.push(val / fact);
        }
        out
    }

    fn bernoulli_coeff(m: usize) -> f64 {
        // 2^{2m}(2^{2m}−1) B_{2m}/(2m)! for m = 1..8
        let b = [1.0 / 6.0, -1.0 / 30.0, 1.0 / 42.0, -1.0 / 30.0, 5.0 / 66.0, -691.0 / 2730.0, 7.0 / 6.0, -3617.0 / 510.0][m - 1];
        let p = libm::pow(2.0, (2 * m) as f64);
        let fact: f64 = (1..=2 * m).map(|k| k as f64).product();
        p * (p - 1.0) * b / fact
    }

    #[test]
    fn theta_examples() {
        assert_eq!(theta(0.0).unwrap(), 0.0);
        assert_eq!(theta(0.5).unwrap(), 1.0);
        assert!(matches!(theta(1.0), Err(Error::Domain { .. })));
        assert_relative_eq!(kappa_inv(2.0).unwrap(), 0.5, epsilon = 1e-15);
        assert_relative_eq!(kappa(0.5).unwrap(), 2.0, epsilon = 1e-15);
        assert_eq!(kappa_inv(0.0).unwrap(), 0.0);
    }

    #[test]
    fn tanh_coefficients_at_zero() {
        let c = act_deriv_coeffs(Activation::Tanh, 0.0, 8).unwrap();
        for m in 1..=4 {
            assert_relative_eq!(c.c(2 * m - 1), bernoulli_coeff(m), epsilon = 1e-15);
            assert_eq!(c.c(2 * m), 0.0);
        }
        assert_relative_eq!(c.c(3), -1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn coefficients_match_polynomial_oracle() {
        for &z in &[0.0, 0.5, -0.5, 1.7, -1.7, 3.0] {
            let c = act_deriv_coeffs(Activation::Tanh, z, 14).unwrap();
            for (l, p) in poly_derivs(z, 14).iter().enumerate() {
                assert!((c.c(l + 1) - p).abs() <= 1e-12 * (1.0 + p.abs()), "z={z} l={}", l + 1);
            }
        }
    }

    #[test]
    fn coefficients_match_finite_differences() {
        // Nested central differences of tanh: f^(l) via a 2l-step stencil is too
        // noisy, so differentiate the exact first derivative numerically once and
        // compare to (l+1) c_{l+1} = d c_l/dz.
        let z = 0.7;
        let h = 1e-5;
        for l in 1..=10 {
            let up = act_deriv_coeffs(Activation::Tanh, z + h, l).unwrap().c(l);
            let dn = act_deriv_coeffs(Activation::Tanh, z - h, l).unwrap().c(l);
            let fd = (up - dn) / (2.0 * h);
            let exact = (l + 1) as f64 * act_deriv_coeffs(Activation::Tanh, z, l + 1).unwrap().c(l + 1);
            assert!((fd - exact).abs() <= 1e-7 * exact.abs().max(1e-3), "l={l}: {fd} vs {exact}");
        }
        let c1 = act_deriv_coeffs(Activation::Tanh, z, 1).unwrap().c(1);
        let fd1 = (libm::tanh(z + h) - libm::tanh(z - h)) / (2.0 * h);
        assert!((c1 - fd1).abs() <= 1e-7 * c1);
    }

    #[test]
    fn closed_form_examples() {
        assert_eq!(tanh_coeff_closed_form(0.0, 2, 1000), 0.0);
        assert_relative_eq!(tanh_coeff_closed_form_tail(0.0, 1, 50), 1.0, epsilon = 1e-12);
        assert!((tanh_coeff_closed_form(0.0, 1, 1_000_000) - 1.0).abs() < 1e-6);
        let exact = act_deriv_coeffs(Activation::Tanh, 1.7, 3).unwrap().c(3);
        let plain = tanh_coeff_closed_form(1.7, 3, 100_000);
        assert!((plain - exact).abs() <= 1e-6 * exact.abs());
    }

    #[test]
    fn closed_form_matches_recurrence_on_grid() {
        for &z in &[0.0, 0.5, -0.5, 1.7, -1.7, 3.0] {
            let c = act_deriv_coeffs(Activation::Tanh, z, 10).unwrap();
            for m in 1..=10 {
                let cf = tanh_coeff_closed_form_tail(z, m, 200);
                let ex = c.c(m);
                let scale = ex.abs().max(1e-12);
                assert!((cf - ex).abs() <= 1e-9 * scale.max(1e-6), "z={z} m={m}: {cf} vs {ex}");
            }
        }
    }

    #[test]
    fn sigma_examples() {
        let p = TruncationPolicy::fixed(16);
        assert_eq!(sigma(Activation::Tanh, 0.0, 0.0, 0.0, &p).unwrap(), 0.0);
        // ζ + ζ³/9 + (2/15)² ζ⁵ + (17/315)² ζ⁷ + … through ζ^15
        let z: f64 = 0.1;
        let oracle: f64 = (1..=8).map(|m| bernoulli_coeff(m).powi(2) * z.powi(2 * m as i32 - 1)).sum();
        let v = sigma(Activation::Tanh, 0.0, 0.0, z, &p).unwrap();
        assert!((v - oracle).abs() < 1e-14);
        assert!((v - 0.100_111_289_180_624).abs() < 1e-14);
        assert!((v - 0.100_111_5).abs() < 1e-6);
    }

    #[test]
    fn sigma_guard_is_enforced() {
        let p = TruncationPolicy::default();
        let lim = series_limit(Activation::Tanh, &p);
        assert!(sigma(Activation::Tanh, 0.0, 0.0, lim * 0.999, &p).is_ok());
        assert!(matches!(sigma(Activation::Tanh, 0.0, 0.0, lim * 1.001, &p), Err(Error::RocBreach { .. })));
    }

    #[test]
    fn sigma_derivatives_match_finite_differences() {
        let p = TruncationPolicy::fixed(16);
        let (z, z2, zeta) = (0.4, -0.9, 0.6);
        let e = sigma_eval(Activation::Tanh, z, z2, zeta, &p).unwrap();
        let h = 1e-6;
        let f = |a: f64, b: f64, c: f64| sigma(Activation::Tanh, a, b, c, &p).unwrap();
        assert_relative_eq!(e.d_zeta, (f(z, z2, zeta + h) - f(z, z2, zeta - h)) / (2.0 * h), max_relative = 1e-7);
        assert_relative_eq!(e.d_z, (f(z + h, z2, zeta) - f(z - h, z2, zeta)) / (2.0 * h), max_relative = 1e-7);
        assert_relative_eq!(e.d_z2, (f(z, z2 + h, zeta) - f(z, z2 - h, zeta)) / (2.0 * h), max_relative = 1e-7);
    }

    #[test]
    fn sigma_bar_is_sigma_at_zero_for_tanh() {
        let p = TruncationPolicy::default();
        for &zeta in &[0.05, 0.3, 0.7, 1.0, 1.2] {
            let (v, z) = sigma_bar_argmax(Activation::Tanh, zeta, &p).unwrap();
            assert_eq!(z, 0.0);
            assert_eq!(v, sigma(Activation::Tanh, 0.0, 0.0, zeta, &p).unwrap());
        }
        assert_eq!(sigma_bar(Activation::Tanh, 0.0, &p).unwrap(), 0.0);
    }

    #[test]
    fn sigma_bar_inverse_round_trip_and_range() {
        let p = TruncationPolicy::default();
        let y = sigma_bar(Activation::Tanh, 0.2, &p).unwrap();
        assert!((sigma_bar_inv(Activation::Tanh, y, &p).unwrap() - 0.2).abs() <= 1e-10);
        assert!(matches!(sigma_bar_inv(Activation::Tanh, 1e3, &p), Err(Error::Range { .. })));
        assert!(matches!(sigma_bar_inv(Activation::Tanh, -1.0, &p), Err(Error::Range { .. })));
    }

    #[test]
    fn policy_validation() {
        assert!(TruncationPolicy::default().validate().is_ok());
        assert!(TruncationPolicy { order: 1, ..Default::default() }.validate().is_err());
        assert!(TruncationPolicy { guard: 1.0, ..Default::default() }.validate().is_err());
        assert!(TruncationPolicy { tolerance: 0.0, ..Default::default() }.validate().is_err());
    }

    proptest! {
        /// θ, κ and θ' round-trip through their inverses.
        ///
        /// θ's round trip passes through ζ = y/(1+y) ≈ 1, where one ulp of ζ moves
        /// θ by a relative (1+y)·2⁻⁵³; the bound is 1e-12 up to y = 10³ and that
        /// conditioning limit beyond.
        #[test]
        fn round_trips(e in -6.0f64..6.0) {
            let y = libm::pow(10.0, e);
            let cond = 1e-12f64.max(4.0 * f64::EPSILON * (1.0 + y));
            prop_assert!((theta(theta_inv(y).unwrap()).unwrap() - y).abs() <= cond * y);
            if y <= 1e3 {
                prop_assert!((theta(theta_inv(y).unwrap()).unwrap() - y).abs() <= 1e-12 * y);
            }
            prop_assert!((kappa(kappa_inv(y).unwrap()).unwrap() - y).abs() <= 1e-12 * y);
            let y1 = 1.0 + y;
            prop_assert!((theta_prime(theta_prime_inv(y1).unwrap()).unwrap() - y1).abs() <= 1e-12 * y1);
        }

        /// σ_{z,z} is strictly increasing in ζ ≥ 0 on the guarded domain.
        #[test]
        fn sigma_is_increasing(z in -3.0f64..3.0, a in 0.0f64..2.2, b in 0.0f64..2.2) {
            let p = TruncationPolicy::default();
            prop_assume!((a - b).abs() > 1e-6);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let slo = sigma(Activation::Tanh, z, z, lo, &p).unwrap();
            let shi = sigma(Activation::Tanh, z, z, hi, &p).unwrap();
            prop_assert!(shi > slo);
        }

        /// Raising the minimum order from 16 to 24 moves guarded σ values by ≤ 1e-10.
        #[test]
        fn tail_discipline(z in -3.0f64..3.0, z2 in -3.0f64..3.0, frac in -1.0f64..1.0) {
            let p16 = TruncationPolicy::default();
            let p24 = TruncationPolicy { order: 24, ..p16 };
            let zeta = frac * series_limit(Activation::Tanh, &p16);
            let a = sigma(Activation::Tanh, z, z2, zeta, &p16).unwrap();
            let b = sigma(Activation::Tanh, z, z2, zeta, &p24).unwrap();
            prop_assert!((a - b).abs() <= 1e-10);
        }

        /// c_1 = 1 − tanh²(z).
        #[test]
        fn first_coefficient(z in -5.0f64..5.0) {
            let c = act_deriv_coeffs(Activation::Tanh, z, 1).unwrap();
            let t = libm::tanh(z);
            prop_assert!((c.c(1) - (1.0 - t * t)).abs() <= 1e-15);
        }
    }
}
