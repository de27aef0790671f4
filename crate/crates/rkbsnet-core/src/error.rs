//! Error type shared by every numerical module.

use alloc::string::String;
use thiserror::Error;

/// Failures raised by the numerical core.
///
/// Domain errors are never silently turned into NaNs: each recursion node checks
/// its argument and reports the layer and neuron pair that left the admissible
/// region.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A network specification field is invalid.
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    /// An array did not have the shape required by the network spec.
    #[error("shape mismatch for {what}: expected {expected}, found {found}")]
    Shape {
        /// Which object was malformed.
        what: &'static str,
        /// Expected length or dimension.
        expected: usize,
        /// Length or dimension actually supplied.
        found: usize,
    },
    /// A scalar helper was evaluated outside its domain.
    #[error("{func} evaluated outside its domain at {arg}")]
    Domain {
        /// Name of the helper function.
        func: &'static str,
        /// Offending argument.
        arg: f64,
    },
    /// A power-series argument left the guarded radius of convergence.
    #[error("series argument {arg} exceeds guarded limit {limit} at layer {layer}, neurons ({i}, {i2})")]
    RocBreach {
        /// Layer index.
        layer: usize,
        /// First output neuron.
        i: usize,
        /// Second output neuron.
        i2: usize,
        /// Series argument.
        arg: f64,
        /// Guarded limit.
        limit: f64,
    },
    /// A geometric-series argument reached the pole of θ.
    #[error("theta argument {arg} is outside (-1, 1) at layer {layer}, neurons ({i}, {i2})")]
    ThetaBreach {
        /// Layer index.
        layer: usize,
        /// First output neuron.
        i: usize,
        /// Second output neuron.
        i2: usize,
        /// θ argument.
        arg: f64,
    },
    /// An adaptive series did not reach the requested tolerance.
    #[error("series did not converge: order {order}, tail estimate {tail}")]
    NotConverged {
        /// Largest order tried.
        order: usize,
        /// Final tail estimate.
        tail: f64,
    },
    /// An explicit feature vector would exceed the coefficient budget.
    #[error("explicit feature needs {needed} coefficients, budget is {budget}")]
    BudgetExceeded {
        /// Coefficients required.
        needed: usize,
        /// Configured cap.
        budget: usize,
    },
    /// Two feature vectors do not share a block layout.
    #[error("feature layouts are not aligned: {0}")]
    LayoutMismatch(String),
    /// An inverse was requested for a value outside the function's range.
    #[error("{func}: value {value} is outside the attainable range [{lo}, {hi}]")]
    Range {
        /// Name of the inverted function.
        func: &'static str,
        /// Requested value.
        value: f64,
        /// Lower end of the range.
        lo: f64,
        /// Upper end of the range.
        hi: f64,
    },
    /// A weight matrix is identically zero where a non-zero one is required.
    #[error("weight matrix of layer {layer} is identically zero")]
    TrivialLayer {
        /// Layer index.
        layer: usize,
    },
    /// A quantity that must be positive (a norm, a denominator) vanished.
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    /// A weight-step violates a cap required by a bound.
    #[error("step cap violated at layer {layer}: {value} >= {cap}")]
    StepCap {
        /// Layer index.
        layer: usize,
        /// Measured squared step magnitude.
        value: f64,
        /// Admissible squared cap.
        cap: f64,
    },
    /// A scalar root-find could not bracket a root.
    #[error("no root for {what} in bracket [{lo}, {hi}] (values {flo}, {fhi})")]
    NoRoot {
        /// What was being solved for.
        what: String,
        /// Lower bracket end.
        lo: f64,
        /// Upper bracket end.
        hi: f64,
        /// Residual at the lower end.
        flo: f64,
        /// Residual at the upper end.
        fhi: f64,
    },
    /// A parameter is outside its admissible interval.
    #[error("parameter {name} = {value} is out of range: {why}")]
    Parameter {
        /// Parameter name.
        name: &'static str,
        /// Supplied value.
        value: f64,
        /// Required interval, in words.
        why: &'static str,
    },
}

/// Result alias used throughout the core crate.
pub type Result<T> = core::result::Result<T, Error>;
