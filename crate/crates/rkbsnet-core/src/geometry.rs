//! Induced kernels, induced norms and their gradients, evaluated by layer
//! recursions instead of explicit features.
//!
//! With `K^[j-1]_kk` the lower-layer kernel diagonal, the data kernel is
//!
//! ```text
//! layer 0  K_X[i,i'] = σ_{z_i,z'_i'}( μ_i μ_i' (½α² + ⟨x,x'⟩/(2H^[0])) )
//! layer j  K_X[i,i'] = σ_{z_i,z'_i'}( μ_i μ_i' [½α² + ⟨x^[j],x'^[j]⟩/H^[j]
//!                         + Σ_k (W_Oki W_Oki'/(ω̃_ki ω̃_ki') + 1) ω_k²/H^[j] K^[j-1]_kk] )
//! ```
//!
//! with `z = x̃_O(x)`, and the weight-step kernel is
//!
//! ```text
//! layer 0  K_W[i,i'] = θ( (2 b b' + 2⟨W:i, W':i'⟩) / (μ_i μ_i') )
//! layer j  K_W[i,i'] = θ( [2 b b' + ⟨W:i, W':i'⟩ + Σ_k (ω̃_ki ω̃_ki' + W_ki W'_ki') K^[j-1]_kk/ω_k²] / (μ_i μ_i') )
//! ```
//!
//! Norms are the traces of the diagonal kernels. Gradients are exact: the
//! `Ψ`-norm gradient uses a reverse adjoint over layers, and the `x`- and
//! step-gradients of the kernels use forward-mode derivative vectors that
//! include the dependence of the Taylor centres `z = x̃_O(x)` on `x`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::features::ScalingConfig;
use crate::linalg::{dot, max_of, norm_sq, Mat};
use crate::net::{forward, network_delta, ForwardTrace, NetworkSpec, WeightState, WeightStep, Weights};
use crate::series::{sigma_eval, theta, theta_prime, SigmaEval, TruncationPolicy};

/// Fanout constants `s^[j]²` and the activation bounds behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct FanoutConstants {
    /// `s2[j] = s^[j]²`.
    pub s2: Vec<f64>,
    /// `input_bounds[j] = M^[j-1]`, the bound on the entries of `x^[j]`.
    pub input_bounds: Vec<f64>,
}

/// `s^[0]² = ½α^[0]² + ½(n/H^[0])M^[-1]²` and `s^[j]² = ½α^[j]² + (H^[j-1]/H^[j])M^[j-1]²`.
pub fn fanout_constants(spec: &NetworkSpec) -> FanoutConstants {
    let input_bounds: Vec<f64> = (0..spec.depth()).map(|j| spec.input_bound_of_layer(j)).collect();
    let s2 = (0..spec.depth())
        .map(|j| {
            let ratio = spec.in_width(j) as f64 / spec.width(j) as f64;
            let m2 = input_bounds[j] * input_bounds[j];
            let half = if j == 0 { 0.5 } else { 1.0 };
            0.5 * spec.alpha[j] * spec.alpha[j] + half * ratio * m2
        })
        .collect();
    FanoutConstants { s2, input_bounds }
}

/// Which weight-step magnitude `t^[j]²` to report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepVariant {
    /// `2b² + 2‖W:i‖²` at layer 0 and `2b² + ‖W:i‖²` above.
    Plain,
    /// `2b² + ((2−δ)/(1−δ))‖W:i‖²` above layer 0, the literal canonical form.
    Boxast {
        /// Shadow-weight slack `δ ∈ (0, 1)`.
        delta: f64,
    },
    /// `2b² + (1 + H^[j-1]/(1−δ))‖W:i‖²` above layer 0: the exact `Ψ`-norm
    /// numerator under canonical shadow weights. Equals `Boxast` when `H^[j-1] = 1`.
    Canonical {
        /// Shadow-weight slack `δ ∈ (0, 1)`.
        delta: f64,
    },
}

/// Per-neuron weight-step magnitudes `t^[j]_i²`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMagnitudes {
    /// `t2[j][i] = t^[j]_i²`.
    pub t2: Vec<Vec<f64>>,
    /// Variant used.
    pub variant: StepVariant,
}

impl StepMagnitudes {
    /// `‖t^[j]‖²_∞ = max_i t^[j]_i²`.
    pub fn inf_sq(&self, j: usize) -> f64 {
        max_of(&self.t2[j]).max(0.0)
    }
}

/// Computes `t^[j]_i²` for every layer and neuron.
pub fn step_magnitudes(spec: &NetworkSpec, step: &WeightStep, variant: StepVariant) -> Result<StepMagnitudes> {
    step.check_shape(spec)?;
    if let StepVariant::Boxast { delta } | StepVariant::Canonical { delta } = variant {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Parameter { name: "delta", value: delta, why: "must lie in (0, 1)" });
        }
    }
    let t2 = (0..spec.depth())
        .map(|j| {
            let l = &step.layers[j];
            let wfac = if j == 0 {
                2.0
            } else {
                match variant {
                    StepVariant::Plain => 1.0,
                    StepVariant::Boxast { delta } => (2.0 - delta) / (1.0 - delta),
                    StepVariant::Canonical { delta } => 1.0 + spec.in_width(j) as f64 / (1.0 - delta),
                }
            };
            (0..spec.width(j)).map(|i| 2.0 * l.b[i] * l.b[i] + wfac * l.w.col_norm_sq(i)).collect()
        })
        .collect();
    Ok(StepMagnitudes { t2, variant })
}

fn relabel(e: Error, layer: usize, i: usize, i2: usize) -> Error {
    match e {
        Error::RocBreach { arg, limit, .. } => Error::RocBreach { layer, i, i2, arg, limit },
        other => other,
    }
}

fn sigma_at(spec: &NetworkSpec, j: usize, i: usize, i2: usize, z: f64, z2: f64, zeta: f64, policy: &TruncationPolicy) -> Result<SigmaEval> {
    sigma_eval(spec.activations[j], z, z2, zeta, policy).map_err(|e| relabel(e, j, i, i2))
}

fn theta_at(j: usize, i: usize, i2: usize, zeta: f64) -> Result<f64> {
    if !(zeta.abs() < 1.0) {
        return Err(Error::ThetaBreach { layer: j, i, i2, arg: zeta });
    }
    theta(zeta)
}

fn check_inputs(spec: &NetworkSpec, scaling: &ScalingConfig, policy: &TruncationPolicy) -> Result<()> {
    spec.validate()?;
    scaling.validate(spec)?;
    policy.validate()
}

/// Per-layer data kernels `K_X^[j](x, x')`, each `H^[j] × H^[j]`.
pub fn kernel_xx_layers(spec: &NetworkSpec, w_o: &WeightState, scaling: &ScalingConfig, x: &[f64], x2: &[f64], policy: &TruncationPolicy) -> Result<Vec<Mat>> {
    check_inputs(spec, scaling, policy)?;
    let (ta, tb) = (forward(spec, w_o, x)?, forward(spec, w_o, x2)?);
    let mut out: Vec<Mat> = Vec::with_capacity(spec.depth());
    for j in 0..spec.depth() {
        let h = spec.width(j);
        let hf = h as f64;
        let a2 = 0.5 * spec.alpha[j] * spec.alpha[j];
        let xx = dot(ta.layer_input(j), tb.layer_input(j));
        let mut k = Mat::zeros(h, h);
        for i in 0..h {
            for i2 in 0..h {
                let mut inner = if j == 0 { a2 + xx / (2.0 * hf) } else { a2 + xx / hf };
                if j > 0 {
                    let (w, om, omt, low) = (&w_o.layers[j].w, &scaling.omega[j], &scaling.omega_tilde[j], &out[j - 1]);
                    for kk in 0..spec.in_width(j) {
                        let c = w[(kk, i)] * w[(kk, i2)] / (omt[(kk, i)] * omt[(kk, i2)]) + 1.0;
                        inner += c * om[kk] * om[kk] / hf * low[(kk, kk)];
                    }
                }
                let zeta = scaling.mu[j][i] * scaling.mu[j][i2] * inner;
                k[(i, i2)] = sigma_at(spec, j, i, i2, ta.pre[j][i], tb.pre[j][i2], zeta, policy)?.value;
            }
        }
        out.push(k);
    }
    Ok(out)
}

/// Output-layer data kernel `K_X(x, x')`, `m × m`.
pub fn kernel_xx(spec: &NetworkSpec, w_o: &WeightState, scaling: &ScalingConfig, x: &[f64], x2: &[f64], policy: &TruncationPolicy) -> Result<Mat> {
    Ok(kernel_xx_layers(spec, w_o, scaling, x, x2, policy)?.pop().expect("depth ≥ 1"))
}

/// Per-layer weight-step kernels `K_W^[j](W_Δ, W'_Δ)`.
pub fn kernel_ww_layers(spec: &NetworkSpec, scaling: &ScalingConfig, step: &WeightStep, step2: &WeightStep) -> Result<Vec<Mat>> {
    spec.validate()?;
    scaling.validate(spec)?;
    step.check_shape(spec)?;
    step2.check_shape(spec)?;
    let mut out: Vec<Mat> = Vec::with_capacity(spec.depth());
    for j in 0..spec.depth() {
        let h = spec.width(j);
        let (la, lb) = (&step.layers[j], &step2.layers[j]);
        let mut k = Mat::zeros(h, h);
        for i in 0..h {
            for i2 in 0..h {
                let ww: f64 = (0..spec.in_width(j)).map(|kk| la.w[(kk, i)] * lb.w[(kk, i2)]).sum();
                let mut num = 2.0 * la.b[i] * lb.b[i2];
                if j == 0 {
                    num += 2.0 * ww;
                } else {
                    num += ww;
                    let (om, omt, low) = (&scaling.omega[j], &scaling.omega_tilde[j], &out[j - 1]);
                    for kk in 0..spec.in_width(j) {
                        num += (omt[(kk, i)] * omt[(kk, i2)] + la.w[(kk, i)] * lb.w[(kk, i2)]) * low[(kk, kk)] / (om[kk] * om[kk]);
                    }
                }
                let zeta = num / (scaling.mu[j][i] * scaling.mu[j][i2]);
                k[(i, i2)] = theta_at(j, i, i2, zeta)?;
            }
        }
        out.push(k);
    }
    Ok(out)
}

/// Output-layer weight-step kernel `K_W(W_Δ, W'_Δ)`, `m × m`.
pub fn kernel_ww(spec: &NetworkSpec, scaling: &ScalingConfig, step: &WeightStep, step2: &WeightStep) -> Result<Mat> {
    Ok(kernel_ww_layers(spec, scaling, step, step2)?.pop().expect("depth ≥ 1"))
}

/// Banach kernel `diag(f_{W_O+W_Δ}(x) − f_{W_O}(x))`; exact, no series.
pub fn banach_kernel(spec: &NetworkSpec, w_o: &WeightState, x: &[f64], step: &WeightStep) -> Result<Mat> {
    let d = network_delta(spec, w_o, step, x)?;
    Ok(Mat::from_fn(d.len(), d.len(), |r, c| if r == c { d[r] } else { 0.0 }))
}

/// Per-layer, per-neuron `‖Φ^[j]_i(x)‖²`.
pub fn phi_neuron_norms(spec: &NetworkSpec, w_o: &WeightState, scaling: &ScalingConfig, x: &[f64], policy: &TruncationPolicy) -> Result<Vec<Vec<f64>>> {
    Ok(phi_norm_jets(spec, w_o, scaling, x, policy, false)?.0)
}

/// `‖Φ^[j](x)‖²_F` for every layer.
pub fn phi_norm_sq_layers(spec: &NetworkSpec, w_o: &WeightState, scaling: &ScalingConfig, x: &[f64], policy: &TruncationPolicy) -> Result<Vec<f64>> {
    Ok(phi_neuron_norms(spec, w_o, scaling, x, policy)?.iter().map(|r| r.iter().sum()).collect())
}

/// `‖Φ(x)‖²_F` of the output layer.
pub fn phi_norm_sq(spec: &NetworkSpec, w_o: &WeightState, scaling: &ScalingConfig, x: &[f64], policy: &TruncationPolicy) -> Result<f64> {
    Ok(*phi_norm_sq_layers(spec, w_o, scaling, x, policy)?.last().expect("depth ≥ 1"))
}

/// `∇_x ‖Φ(x)‖²_F`, including the dependence of every Taylor centre on `x`.
pub fn phi_norm_sq_grad_x(spec: &NetworkSpec, w_o: &WeightState, scaling: &ScalingConfig, x: &[f64], policy: &TruncationPolicy) -> Result<Vec<f64>> {
    let (_, grads) = phi_norm_jets(spec, w_o, scaling, x, policy, true)?;
    let last = grads.last().expect("depth ≥ 1");
    let mut g = vec![0.0; spec.input_dim];
    for row in last {
        for (gi, v) in g.iter_mut().zip(row) {
            *gi += v;
        }
    }
    Ok(g)
}

/// Jacobians `∂x^[j]/∂x` and `∂x̃^[j]/∂x` (rows indexed by neuron, columns by input).
fn forward_jacobians(spec: &NetworkSpec, w_o: &WeightState, tr: &ForwardTrace) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>) {
    let n = spec.input_dim;
    let mut dx: Vec<Vec<Vec<f64>>> = vec![(0..n).map(|a| (0..n).map(|b| if a == b { 1.0 } else { 0.0 }).collect()).collect()];
    let mut dz = Vec::with_capacity(spec.depth());
    for j in 0..spec.depth() {
        let w = &w_o.layers[j].w;
        let r = 1.0 / libm::sqrt(spec.width(j) as f64);
        let rows: Vec<Vec<f64>> = (0..spec.width(j))
            .map(|i| {
                let mut g = vec![0.0; n];
                for (k, dk) in dx[j].iter().enumerate() {
                    for (gv, v) in g.iter_mut().zip(dk) {
                        *gv += r * w[(k, i)] * v;
                    }
                }
                g
            })
            .collect();
        let act = spec.activations[j];
        dx.push(rows.iter().zip(&tr.pre[j]).map(|(g, &z)| g.iter().map(|v| act.deriv(z) * v).collect()).collect());
        dz.push(rows);
    }
    (dx, dz)
}

type Jets = (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>);

fn phi_norm_jets(spec: &NetworkSpec, w_o: &WeightState, scaling: &ScalingConfig, x: &[f64], policy: &TruncationPolicy, grads: bool) -> Result<Jets> {
    check_inputs(spec, scaling, policy)?;
    let tr = forward(spec, w_o, x)?;
    let n = spec.input_dim;
    let (dx, dz) = if grads { forward_jacobians(spec, w_o, &tr) } else { (Vec::new(), Vec::new()) };
    let mut vals: Vec<Vec<f64>> = Vec::with_capacity(spec.depth());
    let mut ders: Vec<Vec<Vec<f64>>> = Vec::with_capacity(spec.depth());
    for j in 0..spec.depth() {
        let hf = spec.width(j) as f64;
        let xin = tr.layer_input(j);
        let a2 = 0.5 * spec.alpha[j] * spec.alpha[j];
        let xnorm = norm_sq(xin);
        let xscale = if j == 0 { 1.0 / (2.0 * hf) } else { 1.0 / hf };
        // ∂‖x^[j]‖²/∂x = 2 Σ_k x_k ∂x_k/∂x
        let dxnorm: Vec<f64> = if grads {
            (0..n).map(|c| 2.0 * xin.iter().enumerate().map(|(k, xk)| xk * dx[j][k][c]).sum::<f64>()).collect()
        } else {
            Vec::new()
        };
        let mut row = Vec::with_capacity(spec.width(j));
        let mut drow = Vec::with_capacity(spec.width(j));
        for i in 0..spec.width(j) {
            let mu2 = scaling.mu[j][i] * scaling.mu[j][i];
            let mut inner = a2 + xnorm * xscale;
            let mut dinner: Vec<f64> = dxnorm.iter().map(|v| v * xscale).collect();
            if j > 0 {
                let (w, om, omt) = (&w_o.layers[j].w, &scaling.omega[j], &scaling.omega_tilde[j]);
                for k in 0..spec.in_width(j) {
                    let c = (w[(k, i)] * w[(k, i)] / (omt[(k, i)] * omt[(k, i)]) + 1.0) * om[k] * om[k] / hf;
                    inner += c * vals[j - 1][k];
                    if grads {
                        for (dv, lv) in dinner.iter_mut().zip(&ders[j - 1][k]) {
                            *dv += c * lv;
                        }
                    }
                }
            }
            let z = tr.pre[j][i];
            let e = sigma_at(spec, j, i, i, z, z, mu2 * inner, policy)?;
            row.push(e.value);
            if grads {
                let dzc = e.d_z + e.d_z2;
                drow.push((0..n).map(|c| dzc * dz[j][i][c] + e.d_zeta * mu2 * dinner[c]).collect());
            }
        }
        vals.push(row);
        ders.push(drow);
    }
    Ok((vals, ders))
}

/// Layer-by-layer quantities of the `Ψ`-norm recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiRecursion {
    /// `numer[j][i]`: the θ numerator `2b² + 2‖W:i‖²` (layer 0) or
    /// `2b² + ‖W:i‖² + Σ_k (ω̃_ki² + W_ki²) ‖Ψ^[j-1]_k‖²/ω_k²` (layer `j > 0`).
    pub numer: Vec<Vec<f64>>,
    /// `arg[j][i] = numer[j][i] / μ_i²`.
    pub arg: Vec<Vec<f64>>,
    /// `norm[j][i] = ‖Ψ^[j]_i‖² = θ(arg[j][i])`.
    pub norm: Vec<Vec<f64>>,
}

/// Runs the `Ψ`-norm recursion, reporting the first θ breach.
pub fn psi_recursion(spec: &NetworkSpec, scaling: &ScalingConfig, step: &WeightStep) -> Result<PsiRecursion> {
    spec.validate()?;
    scaling.validate(spec)?;
    step.check_shape(spec)?;
    let d = spec.depth();
    let (mut numer, mut arg, mut norm) = (Vec::with_capacity(d), Vec::with_capacity(d), Vec::<Vec<f64>>::with_capacity(d));
    for j in 0..d {
        let l = &step.layers[j];
        let (mut nr, mut ar, mut vr) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..spec.width(j) {
            let mut t = 2.0 * l.b[i] * l.b[i];
            if j == 0 {
                t += 2.0 * l.w.col_norm_sq(i);
            } else {
                t += l.w.col_norm_sq(i);
                let (om, omt) = (&scaling.omega[j], &scaling.omega_tilde[j]);
                for k in 0..spec.in_width(j) {
                    t += (omt[(k, i)] * omt[(k, i)] + l.w[(k, i)] * l.w[(k, i)]) * norm[j - 1][k] / (om[k] * om[k]);
                }
            }
            let a = t / (scaling.mu[j][i] * scaling.mu[j][i]);
            let v = theta_at(j, i, i, a)?;
            nr.push(t);
            ar.push(a);
            vr.push(v);
        }
        numer.push(nr);
        arg.push(ar);
        norm.push(vr);
    }
    Ok(PsiRecursion { numer, arg, norm })
}

/// Per-layer, per-neuron `‖Ψ^[j]_i(W_Δ)‖²`.
pub fn psi_neuron_norms(spec: &NetworkSpec, scaling: &ScalingConfig, step: &WeightStep) -> Result<Vec<Vec<f64>>> {
    Ok(psi_recursion(spec, scaling, step)?.norm)
}

/// `‖Ψ^[j](W_Δ)‖²_F` for every layer.
pub fn psi_norm_sq_layers(spec: &NetworkSpec, scaling: &ScalingConfig, step: &WeightStep) -> Result<Vec<f64>> {
    Ok(psi_neuron_norms(spec, scaling, step)?.iter().map(|r| r.iter().sum()).collect())
}

/// `‖Ψ(W_Δ)‖²_F` of the output layer.
pub fn psi_norm_sq(spec: &NetworkSpec, scaling: &ScalingConfig, step: &WeightStep) -> Result<f64> {
    Ok(*psi_norm_sq_layers(spec, scaling, step)?.last().expect("depth ≥ 1"))
}

/// Exact gradient of `‖Ψ(W_Δ)‖²_F` with respect to every weight and bias of
/// the step (the squared norm; divide by `2‖Ψ‖` for the norm itself).
///
/// Reverse adjoint: `A^[D-1]_i = θ'(arg_i)/μ_i²` and
/// `A^[j-1]_k = θ'(arg_k)/μ_k² · Σ_i A^[j]_i (ω̃_ki² + W_ki²)/ω_k²`, giving
/// `∂/∂b = 4 A b`, `∂/∂W^[0] = 4 A W` and `∂/∂W^[j]_ki = 2 A_i (1 + ‖Ψ^[j-1]_k‖²/ω_k²) W_ki`.
pub fn psi_norm_sq_grad(spec: &NetworkSpec, scaling: &ScalingConfig, step: &WeightStep) -> Result<WeightStep> {
    let rec = psi_recursion(spec, scaling, step)?;
    let d = spec.depth();
    let mut grad = Weights::zeros(spec);
    let mut upstream = vec![1.0; spec.width(d - 1)];
    for j in (0..d).rev() {
        let l = &step.layers[j];
        let a: Vec<f64> = (0..spec.width(j))
            .map(|i| {
                let mu2 = scaling.mu[j][i] * scaling.mu[j][i];
                theta_prime(rec.arg[j][i]).map(|tp| upstream[i] * tp / mu2)
            })
            .collect::<Result<_>>()?;
        let g = &mut grad.layers[j];
        for i in 0..spec.width(j) {
            g.b[i] = 4.0 * a[i] * l.b[i];
            for k in 0..spec.in_width(j) {
                g.w[(k, i)] = if j == 0 {
                    4.0 * a[i] * l.w[(k, i)]
                } else {
                    let om2 = scaling.omega[j][k] * scaling.omega[j][k];
                    2.0 * a[i] * (1.0 + rec.norm[j - 1][k] / om2) * l.w[(k, i)]
                };
            }
        }
        if j > 0 {
            let omt = &scaling.omega_tilde[j];
            upstream = (0..spec.in_width(j))
                .map(|k| {
                    let om2 = scaling.omega[j][k] * scaling.omega[j][k];
                    (0..spec.width(j)).map(|i| a[i] * (omt[(k, i)] * omt[(k, i)] + l.w[(k, i)] * l.w[(k, i)]) / om2).sum()
                })
                .collect();
        }
    }
    Ok(grad)
}

/// `∂K_X(x, x')[i, i'] / ∂x`, indexed `[i][i'][input coordinate]`.
pub fn kernel_xx_grad_x(
    spec: &NetworkSpec,
    w_o: &WeightState,
    scaling: &ScalingConfig,
    x: &[f64],
    x2: &[f64],
    policy: &TruncationPolicy,
) -> Result<Vec<Vec<Vec<f64>>>> {
    check_inputs(spec, scaling, policy)?;
    let (ta, tb) = (forward(spec, w_o, x)?, forward(spec, w_o, x2)?);
    let (dx, dz) = forward_jacobians(spec, w_o, &ta);
    let n = spec.input_dim;
    let mut kd: Vec<f64> = Vec::new(); // lower-layer diagonal K_kk
    let mut dkd: Vec<Vec<f64>> = Vec::new(); // its x-gradient
    let mut last = Vec::new();
    for j in 0..spec.depth() {
        let h = spec.width(j);
        let hf = h as f64;
        let a2 = 0.5 * spec.alpha[j] * spec.alpha[j];
        let (xa, xb) = (ta.layer_input(j), tb.layer_input(j));
        let xscale = if j == 0 { 1.0 / (2.0 * hf) } else { 1.0 / hf };
        let xx = dot(xa, xb);
        let dxx: Vec<f64> = (0..n).map(|c| xb.iter().enumerate().map(|(k, v)| v * dx[j][k][c]).sum()).collect();
        let mut kmat = vec![vec![0.0; h]; h];
        let mut dmat = vec![vec![Vec::new(); h]; h];
        for i in 0..h {
            for i2 in 0..h {
                let mut inner = a2 + xx * xscale;
                let mut dinner: Vec<f64> = dxx.iter().map(|v| v * xscale).collect();
                if j > 0 {
                    let (w, om, omt) = (&w_o.layers[j].w, &scaling.omega[j], &scaling.omega_tilde[j]);
                    for k in 0..spec.in_width(j) {
                        let c = (w[(k, i)] * w[(k, i2)] / (omt[(k, i)] * omt[(k, i2)]) + 1.0) * om[k] * om[k] / hf;
                        inner += c * kd[k];
                        for (dv, lv) in dinner.iter_mut().zip(&dkd[k]) {
                            *dv += c * lv;
                        }
                    }
                }
                let mm = scaling.mu[j][i] * scaling.mu[j][i2];
                let e = sigma_at(spec, j, i, i2, ta.pre[j][i], tb.pre[j][i2], mm * inner, policy)?;
                kmat[i][i2] = e.value;
                dmat[i][i2] = (0..n).map(|c| e.d_z * dz[j][i][c] + e.d_zeta * mm * dinner[c]).collect();
            }
        }
        kd = (0..h).map(|i| kmat[i][i]).collect();
        dkd = (0..h).map(|i| dmat[i][i].clone()).collect();
        last = dmat;
    }
    Ok(last)
}

/// `∂K_W(W_Δ, W'_Δ)[i, i'] / ∂W_Δ` over every weight and bias of the first
/// step, indexed `[i][i']` and shaped like a weight-step.
pub fn kernel_ww_grad(spec: &NetworkSpec, scaling: &ScalingConfig, step: &WeightStep, step2: &WeightStep) -> Result<Vec<Vec<WeightStep>>> {
    spec.validate()?;
    scaling.validate(spec)?;
    step.check_shape(spec)?;
    step2.check_shape(spec)?;
    let p = step.num_params();
    // Flat offsets of each layer's W and b blocks.
    let mut offsets = Vec::with_capacity(spec.depth());
    let mut at = 0;
    for j in 0..spec.depth() {
        let nw = spec.in_width(j) * spec.width(j);
        offsets.push((at, at + nw));
        at += nw + spec.width(j);
    }
    let mut kd: Vec<f64> = Vec::new();
    let mut dkd: Vec<Vec<f64>> = Vec::new();
    let mut last = Vec::new();
    for j in 0..spec.depth() {
        let h = spec.width(j);
        let nin = spec.in_width(j);
        let (la, lb) = (&step.layers[j], &step2.layers[j]);
        let (woff, boff) = offsets[j];
        let mut kmat = vec![vec![0.0; h]; h];
        let mut dmat = vec![vec![Vec::new(); h]; h];
        for i in 0..h {
            for i2 in 0..h {
                let wfac = if j == 0 { 2.0 } else { 1.0 };
                let mut num = 2.0 * la.b[i] * lb.b[i2];
                let mut dnum = vec![0.0; p];
                dnum[boff + i] += 2.0 * lb.b[i2];
                for k in 0..nin {
                    num += wfac * la.w[(k, i)] * lb.w[(k, i2)];
                    dnum[woff + k * h + i] += wfac * lb.w[(k, i2)];
                }
                if j > 0 {
                    let (om, omt) = (&scaling.omega[j], &scaling.omega_tilde[j]);
                    for k in 0..nin {
                        let om2 = om[k] * om[k];
                        let c = omt[(k, i)] * omt[(k, i2)] + la.w[(k, i)] * lb.w[(k, i2)];
                        num += c * kd[k] / om2;
                        dnum[woff + k * h + i] += lb.w[(k, i2)] * kd[k] / om2;
                        for (dv, lv) in dnum.iter_mut().zip(&dkd[k]) {
                            *dv += c * lv / om2;
                        }
                    }
                }
                let mm = scaling.mu[j][i] * scaling.mu[j][i2];
                let zeta = num / mm;
                kmat[i][i2] = theta_at(j, i, i2, zeta)?;
                let tp = theta_prime(zeta)?;
                dmat[i][i2] = dnum.iter().map(|v| tp * v / mm).collect::<Vec<f64>>();
            }
        }
        kd = (0..h).map(|i| kmat[i][i]).collect();
        dkd = (0..h).map(|i| dmat[i][i].clone()).collect();
        last = dmat;
    }
    last.into_iter()
        .map(|row| row.into_iter().map(|flat| step.with_flat(&flat)).collect::<Result<Vec<_>>>())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{build_phi, build_psi, gram, norm_sq as feature_norm_sq};
    use crate::net::init_lecun;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn setup(seed: u64) -> (NetworkSpec, WeightState, ScalingConfig, WeightStep, Vec<f64>, Vec<f64>) {
        let spec = NetworkSpec::tanh(2, vec![2, 2], vec![0.6, 0.9]).unwrap();
        let w = init_lecun(&spec, seed).scaled(0.6);
        let mut sc = ScalingConfig::uniform(&spec, 0.8, 1.0, 1.0);
        sc.mu[1][1] = 0.6;
        sc.omega[1][0] = 1.3;
        sc.omega_tilde[1][(1, 0)] = 0.7;
        let step = init_lecun(&spec, seed + 99).scaled(0.05);
        (spec, w, sc, step, vec![0.3, -0.7], vec![-0.2, 0.5])
    }

    fn fd_rel(a: f64, fd: f64, f: f64) -> f64 {
        (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4 * f.abs().max(1.0))
    }

    #[test]
    fn fanout_examples() {
        let spec = NetworkSpec::tanh(3, vec![3], vec![0.0]).unwrap();
        assert_eq!(fanout_constants(&spec).s2[0], 0.5);
        let spec = NetworkSpec::tanh(4, vec![5, 1], vec![0.3, 0.7]).unwrap();
        assert_relative_eq!(fanout_constants(&spec).s2[1], 0.7 * 0.7 / 2.0 + 5.0, epsilon = 1e-15);
        assert_relative_eq!(fanout_constants(&spec).s2[0], 0.3 * 0.3 / 2.0 + 0.5 * 4.0 / 5.0, epsilon = 1e-15);
    }

    #[test]
    fn step_magnitude_variants() {
        let spec = NetworkSpec::tanh(2, vec![3, 1], vec![1.0, 1.0]).unwrap();
        let zero = Weights::zeros(&spec);
        assert!(step_magnitudes(&spec, &zero, StepVariant::Plain).unwrap().t2.iter().flatten().all(|&v| v == 0.0));
        let s = init_lecun(&spec, 1);
        let (b, w2) = (s.layers[1].b[0], s.layers[1].w.col_norm_sq(0));
        let delta = 0.01;
        let plain = step_magnitudes(&spec, &s, StepVariant::Plain).unwrap();
        let boxast = step_magnitudes(&spec, &s, StepVariant::Boxast { delta }).unwrap();
        let canon = step_magnitudes(&spec, &s, StepVariant::Canonical { delta }).unwrap();
        assert_relative_eq!(plain.t2[1][0], 2.0 * b * b + w2, epsilon = 1e-14);
        assert_relative_eq!(boxast.t2[1][0], 2.0 * b * b + (2.0 - delta) / (1.0 - delta) * w2, epsilon = 1e-14);
        assert_relative_eq!(canon.t2[1][0], 2.0 * b * b + (1.0 + 3.0 / (1.0 - delta)) * w2, epsilon = 1e-14);
        assert_eq!(plain.t2[0], boxast.t2[0]);
        assert!(step_magnitudes(&spec, &s, StepVariant::Boxast { delta: 1.0 }).is_err());
    }

    #[test]
    fn trace_identities() {
        let (spec, w, sc, step, x, _) = setup(4);
        let p = TruncationPolicy::default();
        let k = kernel_xx(&spec, &w, &sc, &x, &x, &p).unwrap();
        assert!((k.trace() - phi_norm_sq(&spec, &w, &sc, &x, &p).unwrap()).abs() <= 1e-12);
        assert!(k.diag().iter().all(|&v| v >= 0.0));
        let kw = kernel_ww(&spec, &sc, &step, &step).unwrap();
        assert!((kw.trace() - psi_norm_sq(&spec, &sc, &step).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn kernels_match_explicit_features() {
        let (spec, w, sc, step, x, x2) = setup(6);
        let p = TruncationPolicy::fixed(12);
        let k = kernel_xx(&spec, &w, &sc, &x, &x2, &p).unwrap();
        let g = gram(&build_phi(&spec, &w, &sc, &x, &p).unwrap(), &build_phi(&spec, &w, &sc, &x2, &p).unwrap()).unwrap();
        for (a, b) in k.as_slice().iter().zip(g.as_slice()) {
            assert!((a - b).abs() <= 1e-12);
        }
        let step2 = step.scaled(-0.5);
        let kw = kernel_ww(&spec, &sc, &step, &step2).unwrap();
        let gw = gram(&build_psi(&spec, &sc, &step, &p).unwrap(), &build_psi(&spec, &sc, &step2, &p).unwrap()).unwrap();
        for (a, b) in kw.as_slice().iter().zip(gw.as_slice()) {
            assert!((a - b).abs() <= 1e-9);
        }
        let pn = psi_norm_sq(&spec, &sc, &step).unwrap();
        assert!((pn - feature_norm_sq(&build_psi(&spec, &sc, &step, &p).unwrap()).unwrap()).abs() <= 1e-9);
    }

    #[test]
    fn kernel_xx_is_symmetric_under_swap() {
        let (spec, w, sc, _, x, x2) = setup(8);
        let p = TruncationPolicy::default();
        let a = kernel_xx(&spec, &w, &sc, &x, &x2, &p).unwrap();
        let b = kernel_xx(&spec, &w, &sc, &x2, &x, &p).unwrap();
        assert_eq!(a, b.transpose());
    }

    #[test]
    fn single_layer_psi_norm_closed_form() {
        let spec = NetworkSpec::tanh(2, vec![1], vec![1.0]).unwrap();
        let step = init_lecun(&spec, 2).scaled(0.1);
        let mu = 1.7;
        let sc = ScalingConfig::uniform(&spec, mu, 1.0, 1.0);
        let t2 = 2.0 * step.layers[0].b[0].powi(2) + 2.0 * step.layers[0].w.col_norm_sq(0);
        assert_relative_eq!(psi_norm_sq(&spec, &sc, &step).unwrap(), t2 / (mu * mu - t2), max_relative = 1e-14);
        let g = psi_norm_sq_grad(&spec, &sc, &step).unwrap();
        let expect = theta_prime(t2 / (mu * mu)).unwrap() * 4.0 * step.layers[0].b[0] / (mu * mu);
        assert_relative_eq!(g.layers[0].b[0], expect, max_relative = 1e-14);
    }

    #[test]
    fn single_layer_phi_norm_hand_recursion() {
        let spec = NetworkSpec::tanh(2, vec![1], vec![0.5]).unwrap();
        let w = init_lecun(&spec, 3);
        let sc = ScalingConfig::uniform(&spec, 1.2, 1.0, 1.0);
        let x = [0.4, -0.1];
        let p = TruncationPolicy::default();
        let z = forward(&spec, &w, &x).unwrap().pre[0][0];
        let zeta = 1.44 * (0.5 * 0.25 + (0.16 + 0.01) / 2.0);
        let expect = crate::series::sigma(spec.activations[0], z, z, zeta, &p).unwrap();
        assert_eq!(phi_norm_sq(&spec, &w, &sc, &x, &p).unwrap(), expect);
    }

    #[test]
    fn zero_cases() {
        let (spec, w, sc, _, x, _) = setup(2);
        let zero = Weights::zeros(&spec);
        assert_eq!(psi_norm_sq(&spec, &sc, &zero).unwrap(), 0.0);
        assert_eq!(psi_norm_sq_grad(&spec, &sc, &zero).unwrap().max_abs(), 0.0);
        let kw = kernel_ww_layers(&spec, &sc, &zero, &zero).unwrap();
        assert_eq!(kw[0].max_abs(), 0.0);
        let b = banach_kernel(&spec, &w, &x, &zero).unwrap();
        assert_eq!(b.max_abs(), 0.0);
        // x = 0 on a single-layer net: the ζ-part of the gradient carries an x
        // factor. With zero weights the Taylor centres do not move with x, so the
        // whole gradient vanishes.
        let spec1 = NetworkSpec::tanh(2, vec![2], vec![0.5]).unwrap();
        let sc1 = ScalingConfig::uniform(&spec1, 1.0, 1.0, 1.0);
        let gz = phi_norm_sq_grad_x(&spec1, &Weights::zeros(&spec1), &sc1, &[0.0, 0.0], &TruncationPolicy::default()).unwrap();
        assert_eq!(gz, vec![0.0, 0.0]);
        let _ = (w, x);
    }

    #[test]
    fn banach_kernel_is_diagonal_delta() {
        let (spec, w, _, step, x, _) = setup(3);
        let b = banach_kernel(&spec, &w, &x, &step).unwrap();
        let d = network_delta(&spec, &w, &step, &x).unwrap();
        assert_eq!(b.diag(), d);
        assert_eq!(b[(0, 1)], 0.0);
        assert_eq!(b[(1, 0)], 0.0);
    }

    #[test]
    fn kernel_ww_grad_vanishes_at_zero_partner() {
        let (spec, _, sc, step, _, _) = setup(5);
        let zero = Weights::zeros(&spec);
        let g = kernel_ww_grad(&spec, &sc, &step, &zero).unwrap();
        for row in &g {
            for gi in row {
                assert_eq!(gi.max_abs(), 0.0);
            }
        }
    }

    #[test]
    fn breaches_are_structured() {
        let (spec, w, sc, step, x, _) = setup(1);
        let big = step.scaled(100.0);
        assert!(matches!(psi_norm_sq(&spec, &sc, &big), Err(Error::ThetaBreach { layer: 0, .. })));
        let huge = sc.with_mu_scaled(10.0);
        assert!(matches!(phi_norm_sq(&spec, &w, &huge, &x, &TruncationPolicy::default()), Err(Error::RocBreach { .. })));
    }

    proptest! {
        /// The Ψ-norm gradient matches central differences.
        #[test]
        fn psi_grad_matches_fd(seed in 0u64..300) {
            let (spec, _, sc, step, _, _) = setup(seed);
            let g = psi_norm_sq_grad(&spec, &sc, &step).unwrap().to_flat();
            let flat = step.to_flat();
            let h = 1e-5;
            let f0 = psi_norm_sq(&spec, &sc, &step).unwrap();
            for p in 0..flat.len() {
                let (mut up, mut dn) = (flat.clone(), flat.clone());
                up[p] += h;
                dn[p] -= h;
                let fu = psi_norm_sq(&spec, &sc, &step.with_flat(&up).unwrap()).unwrap();
                let fdn = psi_norm_sq(&spec, &sc, &step.with_flat(&dn).unwrap()).unwrap();
                prop_assert!(fd_rel(g[p], (fu - fdn) / (2.0 * h), f0) <= 1e-6);
            }
        }

        /// The Φ-norm x-gradient matches central differences.
        #[test]
        fn phi_grad_matches_fd(seed in 0u64..300, a in -0.9f64..0.9, b in -0.9f64..0.9) {
            let (spec, w, sc, _, _, _) = setup(seed);
            let p = TruncationPolicy::default();
            let x = [a, b];
            let g = phi_norm_sq_grad_x(&spec, &w, &sc, &x, &p).unwrap();
            let f0 = phi_norm_sq(&spec, &w, &sc, &x, &p).unwrap();
            let h = 1e-5;
            for c in 0..2 {
                let (mut up, mut dn) = (x, x);
                up[c] += h;
                dn[c] -= h;
                let fd = (phi_norm_sq(&spec, &w, &sc, &up, &p).unwrap() - phi_norm_sq(&spec, &w, &sc, &dn, &p).unwrap()) / (2.0 * h);
                prop_assert!(fd_rel(g[c], fd, f0) <= 1e-6);
            }
        }

        /// Kernel gradients match central differences.
        #[test]
        fn kernel_grads_match_fd(seed in 0u64..300) {
            let (spec, w, sc, step, x, x2) = setup(seed);
            let p = TruncationPolicy::default();
            let gx = kernel_xx_grad_x(&spec, &w, &sc, &x, &x2, &p).unwrap();
            let h = 1e-5;
            for c in 0..2 {
                let (mut up, mut dn) = (x.clone(), x.clone());
                up[c] += h;
                dn[c] -= h;
                let ku = kernel_xx(&spec, &w, &sc, &up, &x2, &p).unwrap();
                let kd = kernel_xx(&spec, &w, &sc, &dn, &x2, &p).unwrap();
                for i in 0..2 {
                    for i2 in 0..2 {
                        let fd = (ku[(i, i2)] - kd[(i, i2)]) / (2.0 * h);
                        prop_assert!(fd_rel(gx[i][i2][c], fd, ku[(i, i2)]) <= 1e-6);
                    }
                }
            }
            let step2 = step.scaled(0.7).add(&Weights::zeros(&spec));
            let gw = kernel_ww_grad(&spec, &sc, &step, &step2).unwrap();
            let flat = step.to_flat();
            for q in 0..flat.len() {
                let (mut up, mut dn) = (flat.clone(), flat.clone());
                up[q] += h;
                dn[q] -= h;
                let ku = kernel_ww(&spec, &sc, &step.with_flat(&up).unwrap(), &step2).unwrap();
                let kd = kernel_ww(&spec, &sc, &step.with_flat(&dn).unwrap(), &step2).unwrap();
                for i in 0..2 {
                    for i2 in 0..2 {
                        let fd = (ku[(i, i2)] - kd[(i, i2)]) / (2.0 * h);
                        prop_assert!(fd_rel(gw[i][i2].to_flat()[q], fd, ku[(i, i2)]) <= 1e-6);
                    }
                }
            }
        }

        /// Increasing ‖x‖ along a ray never decreases the layer-0 Φ norm when the
        /// centres are held fixed (zero weights).
        #[test]
        fn layer0_norm_monotone_in_input(a in 0.0f64..0.9, grow in 0.0f64..0.1) {
            let spec = NetworkSpec::tanh(2, vec![2], vec![0.5]).unwrap();
            let w = Weights::zeros(&spec);
            let sc = ScalingConfig::uniform(&spec, 1.0, 1.0, 1.0);
            let p = TruncationPolicy::default();
            let lo = phi_norm_sq(&spec, &w, &sc, &[a, a], &p).unwrap();
            let hi = phi_norm_sq(&spec, &w, &sc, &[a + grow, a + grow], &p).unwrap();
            prop_assert!(hi >= lo);
        }
    }
}
