//! Feedforward network with output-width normalisation, empirical risk and the
//! back-propagation weight-step.
//!
//! Layer `j` maps `x^[j]` (length `H^[j-1]`, with `H^[-1] = n`) to
//!
//! ```text
//! x̃^[j]   = W^[j]ᵀ x^[j] / √H^[j] + α^[j] b^[j]
//! x^[j+1] = τ^[j](x̃^[j])
//! ```
//!
//! The normaliser is the *output* width `H^[j]`. `W^[j]` has shape
//! `H^[j-1] × H^[j]` and is indexed `W[(input, output)]`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};

/// Smooth, bounded activation with a known radius of convergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// Hyperbolic tangent; radius of convergence `π/2` about every real centre.
    Tanh,
}

impl Activation {
    /// Radius of convergence of the Taylor series about any real point.
    pub fn roc(self) -> f64 {
        match self {
            Activation::Tanh => FRAC_PI_2,
        }
    }

    /// Uniform bound `M` on `|τ(z)|`.
    pub fn bound(self) -> f64 {
        match self {
            Activation::Tanh => 1.0,
        }
    }

    /// `τ(z)`.
    pub fn eval(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => libm::tanh(z),
        }
    }

    /// `τ'(z)`.
    pub fn deriv(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = libm::tanh(z);
                1.0 - t * t
            }
        }
    }
}

/// Network architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    /// Input dimension `n` (also written `H^[-1]`).
    pub input_dim: usize,
    /// Layer widths `H^[0..D-1]`; the last entry is the output dimension `m`.
    pub widths: Vec<usize>,
    /// Activation of each layer.
    pub activations: Vec<Activation>,
    /// Bias scales `α^[j] ≥ 0`.
    pub alpha: Vec<f64>,
    /// Radius of convergence `ρ^[j]` of each layer's activation.
    pub roc: Vec<f64>,
    /// Input range `M^[-1]`: inputs live in `[-M, M]^n`.
    pub input_bound: f64,
}

impl NetworkSpec {
    /// All-tanh network with unit input bound.
    pub fn tanh(input_dim: usize, widths: Vec<usize>, alpha: Vec<f64>) -> Result<Self> {
        let depth = widths.len();
        let spec = Self {
            input_dim,
            widths,
            activations: vec![Activation::Tanh; depth],
            alpha,
            roc: vec![FRAC_PI_2; depth],
            input_bound: 1.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let d = self.widths.len();
        if d == 0 {
            return Err(Error::InvalidSpec("depth must be at least 1".into()));
        }
        if self.input_dim == 0 || self.widths.iter().any(|&h| h == 0) {
            return Err(Error::InvalidSpec("all widths must be at least 1".into()));
        }
        for (what, len) in [("activations", self.activations.len()), ("alpha", self.alpha.len()), ("roc", self.roc.len())] {
            if len != d {
                return Err(Error::Shape { what, expected: d, found: len });
            }
        }
        if self.alpha.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::InvalidSpec("alpha must be finite and non-negative".into()));
        }
        for (j, (&r, act)) in self.roc.iter().zip(&self.activations).enumerate() {
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::InvalidSpec(format!("roc of layer {j} must be positive")));
            }
            if r != act.roc() {
                return Err(Error::InvalidSpec(format!("roc of layer {j} must equal the activation's radius {}", act.roc())));
            }
        }
        if !(self.input_bound > 0.0) || !self.input_bound.is_finite() {
            return Err(Error::InvalidSpec("input bound must be positive".into()));
        }
        Ok(())
    }

    /// Depth `D`.
    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    /// Output width `H^[j]` of layer `j`.
    pub fn width(&self, j: usize) -> usize {
        self.widths[j]
    }

    /// Input width `H^[j-1]` of layer `j`.
    pub fn in_width(&self, j: usize) -> usize {
        if j == 0 {
            self.input_dim
        } else {
            self.widths[j - 1]
        }
    }

    /// Output dimension `m = H^[D-1]`.
    pub fn output_dim(&self) -> usize {
        self.widths[self.widths.len() - 1]
    }

    /// Bound `M^[j-1]` on the entries of the input `x^[j]` of layer `j`.
    pub fn input_bound_of_layer(&self, j: usize) -> f64 {
        if j == 0 {
            self.input_bound
        } else {
            self.activations[j - 1].bound()
        }
    }

    /// Total number of weights and biases.
    pub fn num_params(&self) -> usize {
        (0..self.depth()).map(|j| self.in_width(j) * self.width(j) + self.width(j)).sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::Shape { what: "input", expected: self.input_dim, found: x.len() });
        }
        Ok(())
    }
}

/// Weights and bias of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `W^[j]`, shape `H^[j-1] × H^[j]`.
    pub w: Mat,
    /// `b^[j]`, length `H^[j]`.
    pub b: Vec<f64>,
}

/// Per-layer weights and biases.
///
/// The same type carries an absolute weight state and an additive weight-step;
/// see the [`WeightState`] and [`WeightStep`] aliases.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// Layers `0..D`.
    pub layers: Vec<Layer>,
}

/// Network weights `W_O`.
pub type WeightState = Weights;
/// Additive weight-step `W_Δ`.
pub type WeightStep = Weights;

impl Weights {
    /// All-zero weights shaped for `spec`.
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let layers = (0..spec.depth())
            .map(|j| Layer { w: Mat::zeros(spec.in_width(j), spec.width(j)), b: vec![0.0; spec.width(j)] })
            .collect();
        Self { layers }
    }

    /// Checks that every layer matches `spec`.
    pub fn check_shape(&self, spec: &NetworkSpec) -> Result<()> {
        if self.layers.len() != spec.depth() {
            return Err(Error::Shape { what: "layer count", expected: spec.depth(), found: self.layers.len() });
        }
        for (j, l) in self.layers.iter().enumerate() {
            if l.w.rows() != spec.in_width(j) {
                return Err(Error::Shape { what: "weight rows", expected: spec.in_width(j), found: l.w.rows() });
            }
            if l.w.cols() != spec.width(j) {
                return Err(Error::Shape { what: "weight columns", expected: spec.width(j), found: l.w.cols() });
            }
            if l.b.len() != spec.width(j) {
                return Err(Error::Shape { what: "bias length", expected: spec.width(j), found: l.b.len() });
            }
        }
        Ok(())
    }

    /// Number of layers.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Total number of weights and biases.
    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.rows() * l.w.cols() + l.b.len()).sum()
    }

    /// Flattened parameters: per layer, `W` in row-major order followed by `b`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.w.as_slice());
            out.extend_from_slice(&l.b);
        }
        out
    }

    /// Inverse of [`Weights::to_flat`] using `self` as the shape template.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape { what: "flat parameter vector", expected: self.num_params(), found: flat.len() });
        }
        let mut out = self.clone();
        let mut at = 0;
        for l in &mut out.layers {
            let nw = l.w.rows() * l.w.cols();
            l.w.as_mut_slice().copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(out)
    }

    /// `self + other` (shapes must agree).
    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    /// `k · self`.
    pub fn scaled(&self, k: f64) -> Self {
        self.zip_map(self, |a, _| k * a)
    }

    /// Entrywise combination of two equally shaped weight sets.
    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        let a = self.to_flat();
        let b = other.to_flat();
        let flat: Vec<f64> = a.iter().zip(&b).map(|(&x, &y)| f(x, y)).collect();
        // Shapes are identical by construction of the zip.
        self.with_flat(&flat).expect("equal shapes")
    }

    /// Largest absolute weight or bias.
    pub fn max_abs(&self) -> f64 {
        linalg::max_abs(&self.to_flat())
    }

    /// Per-layer non-triviality flags (`W^[j] ≠ 0`).
    pub fn nontrivial_layers(&self) -> Vec<bool> {
        self.layers.iter().map(|l| l.w.as_slice().iter().any(|&v| v != 0.0)).collect()
    }

    /// Errors with the first layer whose weight matrix is identically zero.
    pub fn require_nontrivial(&self) -> Result<()> {
        match self.nontrivial_layers().iter().position(|ok| !ok) {
            Some(layer) => Err(Error::TrivialLayer { layer }),
            None => Ok(()),
        }
    }
}

/// LeCun initialisation: every weight and bias i.i.d. `N(0, 1)`.
///
/// Entries are drawn from a ChaCha20 stream seeded by `seed`, in the order of
/// [`Weights::to_flat`], so equal seeds give bit-identical states.
pub fn init_lecun(spec: &NetworkSpec, seed: u64) -> WeightState {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let template = Weights::zeros(spec);
    let flat: Vec<f64> = (0..template.num_params()).map(|_| StandardNormal.sample(&mut rng)).collect();
    template.with_flat(&flat).expect("flat length matches template")
}

/// Pre- and post-activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Network input `x^[0]`.
    pub input: Vec<f64>,
    /// Pre-activations `x̃^[j]`, one vector per layer.
    pub pre: Vec<Vec<f64>>,
    /// Activations `x^[j+1] = τ(x̃^[j])`, one vector per layer.
    pub post: Vec<Vec<f64>>,
}

impl ForwardTrace {
    /// Network output `f(x) = x^[D]`.
    pub fn output(&self) -> &[f64] {
        &self.post[self.post.len() - 1]
    }

    /// Input `x^[j]` of layer `j`.
    pub fn layer_input(&self, j: usize) -> &[f64] {
        if j == 0 {
            &self.input
        } else {
            &self.post[j - 1]
        }
    }
}

/// Runs the network on `x`.
pub fn forward(spec: &NetworkSpec, weights: &WeightState, x: &[f64]) -> Result<ForwardTrace> {
    spec.check_input(x)?;
    weights.check_shape(spec)?;
    let mut pre = Vec::with_capacity(spec.depth());
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(spec.depth());
    for (j, layer) in weights.layers.iter().enumerate() {
        let xin: &[f64] = if j == 0 { x } else { &post[j - 1] };
        let h = spec.width(j);
        let norm = 1.0 / libm::sqrt(h as f64);
        let z: Vec<f64> = (0..h)
            .map(|i| {
                let s: f64 = (0..xin.len()).map(|k| layer.w[(k, i)] * xin[k]).sum();
                norm * s + spec.alpha[j] * layer.b[i]
            })
            .collect();
        let act = spec.activations[j];
        post.push(z.iter().map(|&v| act.eval(v)).collect());
        pre.push(z);
    }
    Ok(ForwardTrace { input: x.to_vec(), pre, post })
}

/// User-supplied loss with a declared Lipschitz constant.
#[derive(Debug, Clone, Copy)]
pub struct CustomLoss {
    /// `E(f, y)`.
    pub value: fn(&[f64], &[f64]) -> f64,
    /// Writes `∂E/∂f` into the third argument.
    pub grad: fn(&[f64], &[f64], &mut [f64]),
    /// Declared Lipschitz constant `L_E`.
    pub lipschitz: f64,
}

/// Pointwise loss `E(f, y)`.
#[derive(Debug, Clone, Copy, Default)]
pub enum Loss {
    /// `E = ½‖f − y‖²`.
    #[default]
    SquaredError,
    /// Caller-provided loss.
    Custom(CustomLoss),
}

impl Loss {
    /// `E(f, y)`.
    pub fn value(&self, f: &[f64], y: &[f64]) -> f64 {
        match self {
            Loss::SquaredError => 0.5 * f.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
            Loss::Custom(c) => (c.value)(f, y),
        }
    }

    /// `∂E/∂f`.
    pub fn grad(&self, f: &[f64], y: &[f64]) -> Vec<f64> {
        match self {
            Loss::SquaredError => f.iter().zip(y).map(|(a, b)| a - b).collect(),
            Loss::Custom(c) => {
                let mut g = vec![0.0; f.len()];
                (c.grad)(f, y, &mut g);
                g
            }
        }
    }
}

/// Training pairs `(x^k, y^k)` and the loss applied to each.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    /// Inputs `x^k`.
    pub inputs: Vec<Vec<f64>>,
    /// Targets `y^k`.
    pub targets: Vec<Vec<f64>>,
    /// Loss `E`.
    pub loss: Loss,
}

impl TrainingSet {
    /// Squared-error training set.
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> Self {
        Self { inputs, targets, loss: Loss::SquaredError }
    }

    /// Number of pairs `N`.
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    /// `true` when there are no pairs.
    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Checks shapes and the input bound.
    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        if self.inputs.len() != self.targets.len() {
            return Err(Error::Shape { what: "target count", expected: self.inputs.len(), found: self.targets.len() });
        }
        for (x, y) in self.inputs.iter().zip(&self.targets) {
            spec.check_input(x)?;
            if y.len() != spec.output_dim() {
                return Err(Error::Shape { what: "target", expected: spec.output_dim(), found: y.len() });
            }
            if let Some(v) = x.iter().find(|v| !(v.abs() <= spec.input_bound)) {
                return Err(Error::Domain { func: "training input", arg: *v });
            }
        }
        Ok(())
    }

    /// `max_k ‖f(x^k) − y^k‖` at `weights`: the Lipschitz constant of squared
    /// error restricted to the data. Custom losses report their declared value.
    pub fn lipschitz(&self, spec: &NetworkSpec, weights: &WeightState) -> Result<f64> {
        if let Loss::Custom(c) = self.loss {
            return Ok(c.lipschitz);
        }
        let mut best: f64 = 0.0;
        for (x, y) in self.inputs.iter().zip(&self.targets) {
            let f = forward(spec, weights, x)?;
            let r: f64 = f.output().iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
            best = best.max(libm::sqrt(r));
        }
        Ok(best)
    }
}

/// `Σ_k E(x^k, y^k, f_W(x^k))`.
pub fn empirical_risk(spec: &NetworkSpec, weights: &WeightState, data: &TrainingSet) -> Result<f64> {
    data.validate(spec)?;
    let mut total = 0.0;
    for (x, y) in data.inputs.iter().zip(&data.targets) {
        let f = forward(spec, weights, x)?;
        total += data.loss.value(f.output(), y);
    }
    Ok(total)
}

/// Back-propagation adjoints and the resulting weight-step.
#[derive(Debug, Clone, PartialEq)]
pub struct BackpropTrace {
    /// `gammas[k][j]`: unnormalised adjoint of layer `j` for training pair `k`,
    /// aligned with `x̃^[j]`.
    ///
    /// `γ^[D-1] = ∂E/∂f ⊙ τ'(x̃^[D-1])` and
    /// `γ^[j-1]_a = τ'(x̃^[j-1]_a) Σ_i W^[j]_{a,i} γ^[j]_i`; the width
    /// normalisers are applied afterwards as a cascade.
    pub gammas: Vec<Vec<Vec<f64>>>,
    /// The weight-step `W_Δ`.
    pub step: WeightStep,
}

/// One gradient-descent step on the empirical risk.
///
/// ```text
/// W_Δ^[j] = −η / √(H^[D-1]⋯H^[j+1]) Σ_k x^[j] γ^[j]ᵀ / √H^[j]
/// b_Δ^[j] = −η / √(H^[D-1]⋯H^[j+1]) Σ_k α^[j] γ^[j]
/// ```
pub fn backprop_step(spec: &NetworkSpec, weights: &WeightState, data: &TrainingSet, eta: f64) -> Result<BackpropTrace> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(Error::Parameter { name: "eta", value: eta, why: "must be finite and non-negative" });
    }
    data.validate(spec)?;
    weights.check_shape(spec)?;
    let d = spec.depth();
    // cascade[j] = 1/√(H^[D-1]⋯H^[j+1]).
    let mut cascade = vec![1.0; d];
    for j in (0..d.saturating_sub(1)).rev() {
        cascade[j] = cascade[j + 1] / libm::sqrt(spec.width(j + 1) as f64);
    }
    let mut step = Weights::zeros(spec);
    let mut gammas = Vec::with_capacity(data.len());
    for (x, y) in data.inputs.iter().zip(&data.targets) {
        let tr = forward(spec, weights, x)?;
        let dedf = data.loss.grad(tr.output(), y);
        let mut gam: Vec<Vec<f64>> = vec![Vec::new(); d];
        let act = spec.activations[d - 1];
        gam[d - 1] = dedf.iter().zip(&tr.pre[d - 1]).map(|(g, &z)| g * act.deriv(z)).collect();
        for j in (1..d).rev() {
            let w = &weights.layers[j].w;
            let act = spec.activations[j - 1];
            let next = &gam[j];
            gam[j - 1] = (0..spec.width(j - 1))
                .map(|a| act.deriv(tr.pre[j - 1][a]) * (0..spec.width(j)).map(|i| w[(a, i)] * next[i]).sum::<f64>())
                .collect();
        }
        for j in 0..d {
            let xin = tr.layer_input(j);
            let scale = -eta * cascade[j];
            let norm = 1.0 / libm::sqrt(spec.width(j) as f64);
            let layer = &mut step.layers[j];
            for i in 0..spec.width(j) {
                for (a, &xa) in xin.iter().enumerate() {
                    layer.w[(a, i)] += scale * gam[j][i] * xa * norm;
                }
                layer.b[i] += scale * gam[j][i] * spec.alpha[j];
            }
        }
        gammas.push(gam);
    }
    Ok(BackpropTrace { gammas, step })
}

/// `f_{W_O + W_Δ}(x) − f_{W_O}(x)` by two forward passes.
pub fn network_delta(spec: &NetworkSpec, w_o: &WeightState, step: &WeightStep, x: &[f64]) -> Result<Vec<f64>> {
    step.check_shape(spec)?;
    let before = forward(spec, w_o, x)?;
    let after = forward(spec, &w_o.add(step), x)?;
    Ok(after.output().iter().zip(before.output()).map(|(a, b)| a - b).collect())
}

/// Pre-activation change `x̃_Δ^[j] = x̃^[j](W_O + W_Δ) − x̃^[j](W_O)` per layer.
pub fn pre_activation_delta(spec: &NetworkSpec, w_o: &WeightState, step: &WeightStep, x: &[f64]) -> Result<Vec<Vec<f64>>> {
    step.check_shape(spec)?;
    let before = forward(spec, w_o, x)?;
    let after = forward(spec, &w_o.add(step), x)?;
    Ok(after.pre.iter().zip(&before.pre).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p - q).collect()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn tiny(n: usize, widths: Vec<usize>) -> NetworkSpec {
        let d = widths.len();
        NetworkSpec::tanh(n, widths, vec![0.7; d]).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let spec = tiny(3, vec![4, 2]);
        let a = init_lecun(&spec, 7);
        assert_eq!(a, init_lecun(&spec, 7));
        assert_ne!(a, init_lecun(&spec, 8));
        assert_eq!((a.layers[0].w.rows(), a.layers[0].w.cols(), a.layers[0].b.len()), (3, 4, 4));
        assert_eq!((a.layers[1].w.rows(), a.layers[1].w.cols(), a.layers[1].b.len()), (4, 2, 2));
    }

    #[test]
    fn init_sample_mean_is_near_zero() {
        let spec = tiny(100, vec![999]);
        let w = init_lecun(&spec, 7);
        let flat = w.to_flat();
        assert!(flat.len() >= 100_000);
        let mean = flat.iter().sum::<f64>() / flat.len() as f64;
        assert!(mean.abs() <= 0.02, "mean {mean}");
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let spec = tiny(2, vec![3, 2]);
        let f = forward(&spec, &Weights::zeros(&spec), &[0.4, -0.9]).unwrap();
        assert!(f.output().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_unit_hand_value() {
        let spec = NetworkSpec::tanh(1, vec![1], vec![1.0]).unwrap();
        let mut w = Weights::zeros(&spec);
        w.layers[0].w[(0, 0)] = 1.0;
        let f = forward(&spec, &w, &[0.3]).unwrap();
        assert_relative_eq!(f.output()[0], 0.291_312_612_451_591, epsilon = 1e-12);
    }

    #[test]
    fn forward_normalises_by_output_width() {
        let spec = NetworkSpec::tanh(1, vec![4], vec![0.0]).unwrap();
        let mut w = Weights::zeros(&spec);
        w.layers[0].w[(0, 2)] = 1.0;
        let f = forward(&spec, &w, &[0.6]).unwrap();
        assert_relative_eq!(f.pre[0][2], 0.6 / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn risk_examples() {
        let spec = tiny(1, vec![2]);
        let w = Weights::zeros(&spec);
        assert_eq!(empirical_risk(&spec, &w, &TrainingSet::default()).unwrap(), 0.0);
        let data = TrainingSet::new(vec![vec![0.5]], vec![vec![1.0, 1.0]]);
        assert_relative_eq!(empirical_risk(&spec, &w, &data).unwrap(), 1.0, epsilon = 1e-15);
        let perfect = TrainingSet::new(vec![vec![0.5]], vec![vec![0.0, 0.0]]);
        assert_eq!(empirical_risk(&spec, &w, &perfect).unwrap(), 0.0);
    }

    #[test]
    fn zero_learning_rate_gives_zero_step() {
        let spec = tiny(2, vec![3, 1]);
        let w = init_lecun(&spec, 1);
        let data = TrainingSet::new(vec![vec![0.1, 0.2]], vec![vec![0.5]]);
        let tr = backprop_step(&spec, &w, &data, 0.0).unwrap();
        assert_eq!(tr.step.max_abs(), 0.0);
    }

    #[test]
    fn single_unit_bias_step_hand_value() {
        let spec = NetworkSpec::tanh(1, vec![1], vec![1.0]).unwrap();
        let w = Weights::zeros(&spec);
        let (eta, y0) = (0.3, 0.8);
        let data = TrainingSet::new(vec![vec![0.0]], vec![vec![y0]]);
        let tr = backprop_step(&spec, &w, &data, eta).unwrap();
        assert_relative_eq!(tr.step.layers[0].b[0], eta * y0, epsilon = 1e-15);
        assert_relative_eq!(tr.gammas[0][0][0], -y0, epsilon = 1e-15);
    }

    #[test]
    fn delta_of_zero_step_and_full_cancellation() {
        let spec = NetworkSpec::tanh(2, vec![3, 2], vec![0.0, 0.0]).unwrap();
        let w = init_lecun(&spec, 3);
        let x = [0.3, -0.2];
        assert!(network_delta(&spec, &w, &Weights::zeros(&spec), &x).unwrap().iter().all(|&v| v == 0.0));
        let d = network_delta(&spec, &w, &w.scaled(-1.0), &x).unwrap();
        let f = forward(&spec, &w, &x).unwrap();
        for (di, fi) in d.iter().zip(f.output()) {
            assert_relative_eq!(*di, -fi, epsilon = 1e-15);
        }
    }

    #[test]
    fn nontriviality_flags() {
        let spec = tiny(2, vec![2, 1]);
        let mut w = init_lecun(&spec, 5);
        assert!(w.require_nontrivial().is_ok());
        w.layers[1].w = Mat::zeros(2, 1);
        assert_eq!(w.nontrivial_layers(), vec![true, false]);
        assert_eq!(w.require_nontrivial(), Err(Error::TrivialLayer { layer: 1 }));
    }

    #[test]
    fn spec_validation() {
        assert!(NetworkSpec::tanh(0, vec![1], vec![0.0]).is_err());
        assert!(NetworkSpec::tanh(1, vec![], vec![]).is_err());
        assert!(NetworkSpec::tanh(1, vec![1], vec![-1.0]).is_err());
        let mut s = tiny(1, vec![1]);
        s.roc[0] = 1.0;
        assert!(s.validate().is_err());
    }

    proptest! {
        /// Stored activations are τ of the stored pre-activations and lie in [-1, 1].
        #[test]
        fn trace_is_consistent(seed in 0u64..1000, x0 in -1.0f64..1.0, x1 in -1.0f64..1.0) {
            let spec = tiny(2, vec![3, 2, 2]);
            let w = init_lecun(&spec, seed);
            let tr = forward(&spec, &w, &[x0, x1]).unwrap();
            for (z, a) in tr.pre.iter().zip(&tr.post) {
                for (zi, ai) in z.iter().zip(a) {
                    prop_assert_eq!(libm::tanh(*zi), *ai);
                    prop_assert!(ai.abs() <= 1.0);
                }
            }
        }

        /// With the bias zeroed the forward pass ignores α, and b_Δ is linear in α.
        #[test]
        fn bias_step_is_proportional_to_alpha(seed in 0u64..1000, a in 0.1f64..2.0) {
            let spec = NetworkSpec::tanh(2, vec![3, 1], vec![a, a]).unwrap();
            let mut w = init_lecun(&spec, seed);
            w.layers[0].b = vec![0.0; 3];
            let data = TrainingSet::new(vec![vec![0.3, -0.5]], vec![vec![0.4]]);
            let s1 = backprop_step(&spec, &w, &data, 0.1).unwrap().step;
            let mut spec2 = spec.clone();
            spec2.alpha[0] = 2.0 * a;
            let s2 = backprop_step(&spec2, &w, &data, 0.1).unwrap().step;
            for (p, q) in s1.layers[0].b.iter().zip(&s2.layers[0].b) {
                prop_assert!((2.0 * p - q).abs() <= 1e-15 * (1.0 + q.abs()));
            }
        }

        /// Equal inputs give bit-identical traces.
        #[test]
        fn backprop_is_deterministic(seed in 0u64..1000) {
            let spec = tiny(2, vec![2, 2]);
            let w = init_lecun(&spec, seed);
            let data = TrainingSet::new(vec![vec![0.1, 0.9], vec![-0.4, 0.2]], vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
            prop_assert_eq!(backprop_step(&spec, &w, &data, 0.05).unwrap(), backprop_step(&spec, &w, &data, 0.05).unwrap());
        }
    }
}
