//! Explicit truncated feature maps `Φ_O(x)` and `Ψ_O(W_Δ)`.
//!
//! Every neuron of layer `j` gets a feature `ϱ(a, d) = [a_1 d^{⊗1}; a_2 d^{⊗2}; …; a_L d^{⊗L}]`,
//! where for `Φ` the weights `a_l = τ^(l)(x̃_O)/l!` are the Taylor coefficients of
//! the neuron about its pre-activation and for `Ψ` they are all one. The base
//! `d` stacks scaled inputs with the features of the layer below:
//!
//! ```text
//! layer 0   Φ base  μ_i [α/√2 ; x/√(2H^[0])]
//!           Ψ base  (1/μ_i) [√2 b_Δi ; √2 W_Δ:i]
//! layer j   Φ base  μ_i [α/√2 ; x_O/√H ; {ω_k W_Oki/(ω̃_ki √H) Φ_k}_k ; {ω_k/√H Φ_k}_k]
//!           Ψ base  (1/μ_i) [√2 b_Δi ; W_Δ:i ; {ω̃_ki/ω_k Ψ_k}_k ; {W_Δki/ω_k Ψ_k}_k]
//! ```
//!
//! so the base pairing is exactly the pre-activation change `x̃_Δ` and
//! `⟨Φ_i, Ψ_i⟩ = Σ_{l≤L} a_l x̃_Δ^l` reproduces the output change up to the
//! truncation tail.
//!
//! Features are held *factored*: a block of a base is either a vector of scalars
//! or a scaled reference to a lower-layer neuron feature. Inner products use the
//! exact identity `⟨ϱ(a,d), ϱ(a',d')⟩ = Σ_l a_l a'_l ⟨d,d'⟩^l`, and
//! [`TruncatedFeature::dense`] materialises the flat lexicographic Kronecker
//! vector when it fits the coefficient budget.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{dot, Mat};
use crate::net::{forward, NetworkSpec, WeightState, WeightStep};
use crate::series::{act_deriv_coeffs, TruncationPolicy};

/// Default cap on the number of coefficients a dense feature may hold.
pub const DENSE_BUDGET: usize = 2_000_000;

/// Scale factors and shadow weights parameterising the feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingConfig {
    /// `mu[j][i] = μ^[j]_i > 0`, one per output neuron.
    pub mu: Vec<Vec<f64>>,
    /// `omega[j][k] = ω^[j]_k > 0` for `j > 0`, one per input neuron; empty at `j = 0`.
    pub omega: Vec<Vec<f64>>,
    /// `omega_tilde[j][(k, i)] = ω̃^[j]_{k,i} > 0` for `j > 0`, shaped like `W^[j]`;
    /// `0 × 0` at `j = 0`.
    pub omega_tilde: Vec<Mat>,
}

impl ScalingConfig {
    /// Every `μ`, `ω` and `ω̃` set to the given constants.
    pub fn uniform(spec: &NetworkSpec, mu: f64, omega: f64, omega_tilde: f64) -> Self {
        let d = spec.depth();
        Self {
            mu: (0..d).map(|j| vec![mu; spec.width(j)]).collect(),
            omega: (0..d).map(|j| if j == 0 { Vec::new() } else { vec![omega; spec.in_width(j)] }).collect(),
            omega_tilde: (0..d)
                .map(|j| if j == 0 { Mat::zeros(0, 0) } else { Mat::filled(spec.in_width(j), spec.width(j), omega_tilde) })
                .collect(),
        }
    }

    /// Checks shapes against `spec` and strict positivity of every entry.
    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        let d = spec.depth();
        for (what, len) in [("mu layers", self.mu.len()), ("omega layers", self.omega.len()), ("omega_tilde layers", self.omega_tilde.len())] {
            if len != d {
                return Err(Error::Shape { what, expected: d, found: len });
            }
        }
        for j in 0..d {
            if self.mu[j].len() != spec.width(j) {
                return Err(Error::Shape { what: "mu", expected: spec.width(j), found: self.mu[j].len() });
            }
            let (nw, rows, cols) = if j == 0 { (0, 0, 0) } else { (spec.in_width(j), spec.in_width(j), spec.width(j)) };
            if self.omega[j].len() != nw {
                return Err(Error::Shape { what: "omega", expected: nw, found: self.omega[j].len() });
            }
            if self.omega_tilde[j].rows() != rows || self.omega_tilde[j].cols() != cols {
                return Err(Error::Shape { what: "omega_tilde", expected: rows * cols, found: self.omega_tilde[j].rows() * self.omega_tilde[j].cols() });
            }
            let all = self.mu[j].iter().chain(&self.omega[j]).chain(self.omega_tilde[j].as_slice());
            for &v in all {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(Error::Parameter { name: "scaling", value: v, why: "every scale factor and shadow weight must be positive and finite" });
                }
            }
        }
        Ok(())
    }

    /// Copy with every `μ` multiplied by `k`.
    pub fn with_mu_scaled(&self, k: f64) -> Self {
        let mut out = self.clone();
        out.mu.iter_mut().flatten().for_each(|m| *m *= k);
        out
    }
}

/// One block of a neuron's base vector `d`.
#[derive(Debug, Clone, PartialEq)]
pub enum BaseBlock {
    /// Explicit scalar entries.
    Scalars(Vec<f64>),
    /// `factor ×` the full feature of neuron `neuron` in the layer below.
    Sub {
        /// Scalar multiplier.
        factor: f64,
        /// Neuron index in the previous layer.
        neuron: usize,
    },
}

/// The feature `ϱ(a, d)` of one neuron.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronFeature {
    /// `coeffs[l-1] = a_l`, the weight of the block `d^{⊗l}`.
    pub coeffs: Vec<f64>,
    /// Base vector `d` as a sequence of blocks.
    pub base: Vec<BaseBlock>,
}

/// Truncated feature map of a whole network, factored by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedFeature {
    /// Truncation order `L`.
    pub order: usize,
    /// `layers[j][i]`: feature of neuron `i` in layer `j`; the last layer is the output.
    pub layers: Vec<Vec<NeuronFeature>>,
}

impl TruncatedFeature {
    /// Number of output neurons `m`.
    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Vec::len)
    }

    /// Dense length of every neuron feature, `Σ_{l≤L} p^l` with `p` the base length.
    ///
    /// Saturates at `usize::MAX` on overflow.
    pub fn dims(&self) -> Vec<Vec<usize>> {
        let mut dims: Vec<Vec<usize>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let lower = dims.last();
            let row = layer
                .iter()
                .map(|nf| {
                    let p = nf.base.iter().fold(0usize, |acc, b| {
                        acc.saturating_add(match b {
                            BaseBlock::Scalars(v) => v.len(),
                            BaseBlock::Sub { neuron, .. } => lower.map_or(usize::MAX, |l| l[*neuron]),
                        })
                    });
                    let mut total = 0usize;
                    let mut pw = 1usize;
                    for _ in 0..self.order {
                        pw = pw.saturating_mul(p);
                        total = total.saturating_add(pw);
                    }
                    total
                })
                .collect();
            dims.push(row);
        }
        dims
    }

    /// Flat lexicographic Kronecker vectors of the output neurons.
    ///
    /// Errors with [`Error::BudgetExceeded`] if any neuron feature on any layer
    /// would need more than `budget` coefficients.
    pub fn dense(&self, budget: usize) -> Result<Vec<Vec<f64>>> {
        let dims = self.dims();
        if let Some(&needed) = dims.iter().flatten().max() {
            if needed > budget {
                return Err(Error::BudgetExceeded { needed, budget });
            }
        }
        let mut below: Vec<Vec<f64>> = Vec::new();
        for layer in &self.layers {
            let cur: Vec<Vec<f64>> = layer.iter().map(|nf| dense_rho(nf, &below)).collect();
            below = cur;
        }
        Ok(below)
    }
}

fn dense_rho(nf: &NeuronFeature, below: &[Vec<f64>]) -> Vec<f64> {
    let mut d = Vec::new();
    for b in &nf.base {
        match b {
            BaseBlock::Scalars(v) => d.extend_from_slice(v),
            BaseBlock::Sub { factor, neuron } => d.extend(below[*neuron].iter().map(|v| factor * v)),
        }
    }
    let mut out = Vec::new();
    let mut power: Vec<f64> = vec![1.0];
    for &a in &nf.coeffs {
        // d^{⊗l} = d ⊗ d^{⊗(l−1)}: the first index is the most significant.
        let mut next = Vec::with_capacity(d.len() * power.len());
        for &di in &d {
            next.extend(power.iter().map(|p| di * p));
        }
        power = next;
        out.extend(power.iter().map(|p| a * p));
    }
    out
}

fn base_inner(a: &NeuronFeature, b: &NeuronFeature, lower: &[f64]) -> Result<f64> {
    if a.base.len() != b.base.len() {
        return Err(Error::LayoutMismatch(format!("base block counts {} and {}", a.base.len(), b.base.len())));
    }
    let mut s = 0.0;
    for (x, y) in a.base.iter().zip(&b.base) {
        s += match (x, y) {
            (BaseBlock::Scalars(u), BaseBlock::Scalars(v)) if u.len() == v.len() => dot(u, v),
            (BaseBlock::Sub { factor: f, neuron: k }, BaseBlock::Sub { factor: g, neuron: k2 }) if k == k2 => f * g * lower[*k],
            _ => return Err(Error::LayoutMismatch("base blocks differ in kind, length or source neuron".into())),
        };
    }
    Ok(s)
}

fn rho_inner(a: &NeuronFeature, b: &NeuronFeature, lower: &[f64]) -> Result<f64> {
    if a.coeffs.len() != b.coeffs.len() {
        return Err(Error::LayoutMismatch(format!("orders {} and {}", a.coeffs.len(), b.coeffs.len())));
    }
    let g = base_inner(a, b, lower)?;
    let mut pw = 1.0;
    let mut s = 0.0;
    for (ca, cb) in a.coeffs.iter().zip(&b.coeffs) {
        pw *= g;
        s += ca * cb * pw;
    }
    Ok(s)
}

fn check_layers(a: &TruncatedFeature, b: &TruncatedFeature) -> Result<()> {
    if a.order != b.order || a.layers.len() != b.layers.len() {
        return Err(Error::LayoutMismatch("order or depth differs".into()));
    }
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        if la.len() != lb.len() {
            return Err(Error::LayoutMismatch(format!("layer widths {} and {}", la.len(), lb.len())));
        }
    }
    Ok(())
}

/// `⟨a^[j]_k, b^[j]_k⟩` for every layer `j` and neuron `k`.
pub fn layer_pairings(a: &TruncatedFeature, b: &TruncatedFeature) -> Result<Vec<Vec<f64>>> {
    check_layers(a, b)?;
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(a.layers.len());
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        let lower: &[f64] = out.last().map_or(&[], |v| v.as_slice());
        let row = la.iter().zip(lb).map(|(x, y)| rho_inner(x, y, lower)).collect::<Result<Vec<f64>>>()?;
        out.push(row);
    }
    Ok(out)
}

/// Per-output-neuron pairing `diag(Φᵀ Ψ)`.
pub fn bilinear(phi: &TruncatedFeature, psi: &TruncatedFeature) -> Result<Vec<f64>> {
    Ok(layer_pairings(phi, psi)?.pop().unwrap_or_default())
}

/// Full output-layer matrix `G[(i, i')] = ⟨a_i, b_{i'}⟩`.
pub fn gram(a: &TruncatedFeature, b: &TruncatedFeature) -> Result<Mat> {
    let pairs = layer_pairings(a, b)?;
    let d = a.layers.len();
    let lower: &[f64] = if d >= 2 { &pairs[d - 2] } else { &[] };
    let (la, lb) = (&a.layers[d - 1], &b.layers[d - 1]);
    let mut out = Mat::zeros(la.len(), lb.len());
    for (i, x) in la.iter().enumerate() {
        for (i2, y) in lb.iter().enumerate() {
            out[(i, i2)] = rho_inner(x, y, lower)?;
        }
    }
    Ok(out)
}

/// Squared Frobenius norm `Σ_i ‖a_i‖²` of the output-layer features.
pub fn norm_sq(a: &TruncatedFeature) -> Result<f64> {
    Ok(bilinear(a, a)?.iter().sum())
}

/// Builds `Φ_O(x)` truncated at order `policy.order`.
pub fn build_phi(spec: &NetworkSpec, w_o: &WeightState, scaling: &ScalingConfig, x: &[f64], policy: &TruncationPolicy) -> Result<TruncatedFeature> {
    scaling.validate(spec)?;
    policy.validate()?;
    if let Some(v) = x.iter().find(|v| !(v.abs() <= spec.input_bound)) {
        return Err(Error::Domain { func: "build_phi input", arg: *v });
    }
    let tr = forward(spec, w_o, x)?;
    let order = policy.order;
    let mut layers = Vec::with_capacity(spec.depth());
    for j in 0..spec.depth() {
        let h = spec.width(j) as f64;
        let xin = tr.layer_input(j);
        let mut row = Vec::with_capacity(spec.width(j));
        for i in 0..spec.width(j) {
            let mu = scaling.mu[j][i];
            let coeffs = act_deriv_coeffs(spec.activations[j], tr.pre[j][i], order)?.coeffs;
            let base = if j == 0 {
                let r = 1.0 / libm::sqrt(2.0 * h);
                let mut s = vec![mu * spec.alpha[0] / core::f64::consts::SQRT_2];
                s.extend(xin.iter().map(|v| mu * v * r));
                vec![BaseBlock::Scalars(s)]
            } else {
                let r = 1.0 / libm::sqrt(h);
                let mut s = vec![mu * spec.alpha[j] / core::f64::consts::SQRT_2];
                s.extend(xin.iter().map(|v| mu * v * r));
                let w = &w_o.layers[j].w;
                let (om, omt) = (&scaling.omega[j], &scaling.omega_tilde[j]);
                let mut base = vec![BaseBlock::Scalars(s)];
                base.extend((0..spec.in_width(j)).map(|k| BaseBlock::Sub { factor: mu * om[k] * w[(k, i)] / omt[(k, i)] * r, neuron: k }));
                base.extend((0..spec.in_width(j)).map(|k| BaseBlock::Sub { factor: mu * om[k] * r, neuron: k }));
                base
            };
            row.push(NeuronFeature { coeffs, base });
        }
        layers.push(row);
    }
    Ok(TruncatedFeature { order, layers })
}

/// Builds `Ψ_O(W_Δ)` truncated at order `policy.order`.
pub fn build_psi(spec: &NetworkSpec, scaling: &ScalingConfig, step: &WeightStep, policy: &TruncationPolicy) -> Result<TruncatedFeature> {
    scaling.validate(spec)?;
    policy.validate()?;
    step.check_shape(spec)?;
    let order = policy.order;
    let sqrt2 = core::f64::consts::SQRT_2;
    let mut layers = Vec::with_capacity(spec.depth());
    for j in 0..spec.depth() {
        let layer = &step.layers[j];
        let mut row = Vec::with_capacity(spec.width(j));
        for i in 0..spec.width(j) {
            let inv = 1.0 / scaling.mu[j][i];
            let wscale = if j == 0 { sqrt2 } else { 1.0 };
            let mut s = vec![inv * sqrt2 * layer.b[i]];
            s.extend((0..spec.in_width(j)).map(|k| inv * wscale * layer.w[(k, i)]));
            let mut base = vec![BaseBlock::Scalars(s)];
            if j > 0 {
                let (om, omt) = (&scaling.omega[j], &scaling.omega_tilde[j]);
                base.extend((0..spec.in_width(j)).map(|k| BaseBlock::Sub { factor: inv * omt[(k, i)] / om[k], neuron: k }));
                base.extend((0..spec.in_width(j)).map(|k| BaseBlock::Sub { factor: inv * layer.w[(k, i)] / om[k], neuron: k }));
            }
            row.push(NeuronFeature { coeffs: vec![1.0; order], base });
        }
        layers.push(row);
    }
    Ok(TruncatedFeature { order, layers })
}
