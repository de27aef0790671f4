//! The analysis behind each CLI verb.

use log::{debug, info};
use nalgebra::DMatrix;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rkbsnet_core::canonical::{canonical_construct_with, lambda, lambda_normalised, solve_alpha_for_chi, verify_canonical};
use rkbsnet_core::complexity::{rademacher_bound, rademacher_step_bound, two_layer_tanh_example};
use rkbsnet_core::features::{bilinear, build_phi, build_psi, norm_sq, ScalingConfig};
use rkbsnet_core::geometry::{banach_kernel, fanout_constants, kernel_ww, kernel_xx, phi_norm_sq, psi_norm_sq, step_magnitudes, StepVariant};
use rkbsnet_core::net::{backprop_step, empirical_risk, init_lecun, network_delta};
use rkbsnet_core::{Mat, NetworkSpec, TrainingSet, WeightState, WeightStep};
use serde_json::json;

use crate::config::{ExperimentConfig, SweepAxis};
use crate::error::{CliError, Context};
use crate::report::{ReportBundle, Table};

/// Tolerance for the exact-representation check.
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-8;

/// Tolerance for the canonical-scaling identity.
pub const CANONICAL_TOLERANCE: f64 = 1e-8;

/// Smallest eigenvalue (relative to the largest) still counted as PSD.
pub const PSD_TOLERANCE: f64 = 1e-9;

/// CLI verbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::Subcommand)]
pub enum Command {
    /// Run back-propagation steps and report step norms and fan-out constants.
    TrainStep,
    /// Compare the exact network change with the feature-map pairing and kernels.
    VerifyEquivalence,
    /// Gram matrices of the data and weight-step kernels with PSD summaries.
    Kernel,
    /// Canonical scaling of the back-propagation step and its regularisation.
    Canonical,
    /// Rademacher-complexity bounds along the training trajectory.
    Rademacher,
    /// Parameter sweeps producing curve tables.
    Sweep,
}

impl Command {
    /// Verb as typed on the command line.
    pub fn name(self) -> &'static str {
        match self {
            Command::TrainStep => "train-step",
            Command::VerifyEquivalence => "verify-equivalence",
            Command::Kernel => "kernel",
            Command::Canonical => "canonical",
            Command::Rademacher => "rademacher",
            Command::Sweep => "sweep",
        }
    }
}

/// Runs a verb on a validated configuration.
pub fn run(command: Command, config: &ExperimentConfig) -> Result<ReportBundle, CliError> {
    info!("running {} with seed {}", command.name(), config.seed);
    let ctx = Setup::new(config)?;
    let mut bundle = ReportBundle::new(command.name(), config);
    match command {
        Command::TrainStep => train_step(&ctx, &mut bundle)?,
        Command::VerifyEquivalence => verify_equivalence(&ctx, &mut bundle)?,
        Command::Kernel => kernel(&ctx, &mut bundle)?,
        Command::Canonical => canonical(&ctx, &mut bundle)?,
        Command::Rademacher => rademacher(&ctx, &mut bundle)?,
        Command::Sweep => sweep(&ctx, &mut bundle)?,
    }
    Ok(bundle)
}

/// `count` inputs and targets drawn uniformly from `[-1, 1]`.
pub fn random_data(spec: &NetworkSpec, count: usize, seed: u64) -> TrainingSet {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| 2.0 * ((rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64) - 1.0).collect() };
    let inputs = (0..count).map(|_| draw(spec.input_dim)).collect();
    let targets = (0..count).map(|_| draw(spec.output_dim())).collect();
    TrainingSet::new(inputs, targets)
}

struct Setup<'a> {
    config: &'a ExperimentConfig,
    spec: NetworkSpec,
    w_o: WeightState,
    data: TrainingSet,
}

impl<'a> Setup<'a> {
    fn new(config: &'a ExperimentConfig) -> Result<Self, CliError> {
        let spec = config.spec()?;
        let mut w_o = init_lecun(&spec, config.seed);
        if config.network.zero_biases {
            w_o.layers.iter_mut().for_each(|l| l.b.iter_mut().for_each(|b| *b = 0.0));
        }
        let data = config.training_set(&spec)?;
        Ok(Self { config, spec, w_o, data })
    }

    fn scaling(&self) -> ScalingConfig {
        let s = self.config.scaling;
        ScalingConfig::uniform(&self.spec, s.mu, s.omega, s.omega_tilde)
    }

    fn step_at(&self, eta: f64) -> Result<WeightStep, CliError> {
        Ok(backprop_step(&self.spec, &self.w_o, &self.data, eta).context("back-propagation step")?.step)
    }

    /// `T` consecutive steps from `W_O`, with the state before each.
    fn trajectory(&self) -> Result<Vec<(WeightState, WeightStep)>, CliError> {
        let mut w = self.w_o.clone();
        let mut out = Vec::with_capacity(self.config.steps);
        for k in 0..self.config.steps {
            let step = backprop_step(&self.spec, &w, &self.data, self.config.eta).context(&format!("back-propagation step {k}"))?.step;
            let next = w.add(&step);
            out.push((w, step));
            w = next;
        }
        Ok(out)
    }
}

fn frob(w: &WeightStep) -> f64 {
    w.to_flat().iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn train_step(ctx: &Setup, b: &mut ReportBundle) -> Result<(), CliError> {
    let fan = fanout_constants(&ctx.spec);
    b.set("depth", ctx.spec.depth());
    b.set("num_params", ctx.spec.num_params());
    b.set("samples", ctx.data.len());
    b.set("eta", ctx.config.eta);
    b.set("s_sq", &fan.s2);
    b.set("input_bounds", &fan.input_bounds);
    let mut table = Table::new("trajectory", &["step", "risk_before", "risk_after", "step_max_abs", "step_frobenius", "t_inf_sq_output"]);
    let mut t_inf = Vec::new();
    for (k, (w, step)) in ctx.trajectory()?.iter().enumerate() {
        let before = empirical_risk(&ctx.spec, w, &ctx.data).context("empirical risk")?;
        let after = empirical_risk(&ctx.spec, &w.add(step), &ctx.data).context("empirical risk")?;
        let mags = step_magnitudes(&ctx.spec, step, StepVariant::Plain).context("step magnitudes")?;
        let per_layer: Vec<f64> = (0..ctx.spec.depth()).map(|j| mags.inf_sq(j)).collect();
        debug!("step {k}: risk {before:.6e} -> {after:.6e}");
        table.push(vec![k as f64, before, after, step.max_abs(), frob(step), per_layer[ctx.spec.depth() - 1]]);
        t_inf.push(per_layer);
    }
    b.set("t_inf_sq", t_inf);
    b.set("lipschitz", ctx.data.lipschitz(&ctx.spec, &ctx.w_o).context("loss Lipschitz constant")?);
    b.tables.push(table);
    Ok(())
}

fn verify_equivalence(ctx: &Setup, b: &mut ReportBundle) -> Result<(), CliError> {
    let policy = ctx.config.truncation.policy();
    let scaling = ctx.scaling();
    let step = ctx.step_at(ctx.config.eta)?;
    let psi = build_psi(&ctx.spec, &scaling, &step, &policy).context("weight-step feature map")?;
    let psi_rec = psi_norm_sq(&ctx.spec, &scaling, &step).context("weight-step norm recursion")?;
    let psi_feat = norm_sq(&psi).context("weight-step feature norm")?;
    let psi_dev = (psi_rec - psi_feat).abs() / psi_rec.abs().max(1.0);
    let mut table = Table::new("points", &["index", "delta_deviation", "trace_deviation"]);
    let (mut worst, mut worst_trace) = (0.0f64, 0.0f64);
    for (k, x) in ctx.data.inputs.iter().enumerate() {
        let exact = network_delta(&ctx.spec, &ctx.w_o, &step, x).context("network change")?;
        let phi = build_phi(&ctx.spec, &ctx.w_o, &scaling, x, &policy).context("data feature map")?;
        let pair = bilinear(&phi, &psi).context("feature pairing")?;
        let dev = exact.iter().zip(&pair).map(|(a, p)| (a - p).abs()).fold(0.0, f64::max);
        let kxx = kernel_xx(&ctx.spec, &ctx.w_o, &scaling, x, x, &policy).context("data kernel")?;
        let nrm = phi_norm_sq(&ctx.spec, &ctx.w_o, &scaling, x, &policy).context("data norm recursion")?;
        let tr = (kxx.trace() - nrm).abs() / nrm.abs().max(1.0);
        worst = worst.max(dev);
        worst_trace = worst_trace.max(tr);
        table.push(vec![k as f64, dev, tr]);
    }
    b.set("tolerance", EQUIVALENCE_TOLERANCE);
    b.set("max_delta_deviation", worst);
    b.set("max_trace_deviation", worst_trace);
    b.set("psi_norm_deviation", psi_dev);
    b.set("psi_norm_sq", psi_rec);
    let pass = worst <= EQUIVALENCE_TOLERANCE && worst_trace <= EQUIVALENCE_TOLERANCE && psi_dev <= EQUIVALENCE_TOLERANCE;
    b.set("pass", pass);
    b.require(pass);
    b.tables.push(table);
    Ok(())
}

/// Symmetric block Gram matrix `[K(a_p, a_q)]` assembled from `m × m` blocks.
fn block_gram(blocks: &[Vec<Mat>]) -> DMatrix<f64> {
    let m = blocks.first().and_then(|r| r.first()).map_or(0, |k| k.rows());
    let n = blocks.len() * m;
    let g = DMatrix::from_fn(n, n, |r, c| blocks[r / m][c / m].row(r % m)[c % m]);
    (&g + g.transpose()) * 0.5
}

fn eigen_summary(g: &DMatrix<f64>) -> (Vec<f64>, bool) {
    let mut eig: Vec<f64> = g.clone().symmetric_eigenvalues().iter().copied().collect();
    eig.sort_by(f64::total_cmp);
    let top = eig.last().copied().unwrap_or(0.0).abs().max(1.0);
    let psd = eig.first().is_none_or(|&e| e >= -PSD_TOLERANCE * top);
    (eig, psd)
}

fn rows(g: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..g.nrows()).map(|r| g.row(r).iter().copied().collect()).collect()
}

fn kernel(ctx: &Setup, b: &mut ReportBundle) -> Result<(), CliError> {
    let policy = ctx.config.truncation.policy();
    let scaling = ctx.scaling();
    let points = ctx.config.kernel.points.clone().unwrap_or_else(|| ctx.data.inputs.clone());
    if points.iter().any(|p| p.len() != ctx.spec.input_dim) {
        return Err(CliError::Config(format!("kernel.points must have length {}", ctx.spec.input_dim)));
    }
    let step = ctx.step_at(ctx.config.eta)?;
    let steps: Vec<WeightStep> = ctx.config.kernel.step_scales.iter().map(|&s| step.scaled(s)).collect();

    let kx = points
        .iter()
        .map(|a| points.iter().map(|c| kernel_xx(&ctx.spec, &ctx.w_o, &scaling, a, c, &policy)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()
        .context("data kernel Gram matrix")?;
    let kw = steps
        .iter()
        .map(|a| steps.iter().map(|c| kernel_ww(&ctx.spec, &scaling, a, c)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()
        .context("weight-step kernel Gram matrix")?;
    let banach = points
        .iter()
        .map(|x| banach_kernel(&ctx.spec, &ctx.w_o, x, &step).map(|m| m.diag()))
        .collect::<Result<Vec<_>, _>>()
        .context("Banach kernel")?;

    let (gx, gw) = (block_gram(&kx), block_gram(&kw));
    let (ex, psd_x) = eigen_summary(&gx);
    let (ew, psd_w) = eigen_summary(&gw);
    b.set("points", &points);
    b.set("step_scales", &ctx.config.kernel.step_scales);
    b.set("kx_gram", rows(&gx));
    b.set("kx_eigenvalues", &ex);
    b.set("kx_psd", psd_x);
    b.set("kw_gram", rows(&gw));
    b.set("kw_eigenvalues", &ew);
    b.set("kw_psd", psd_w);
    b.set("banach_kernel_diag", banach);
    b.require(psd_x && psd_w);
    let mut tx = Table::new("kx_eigenvalues", &["index", "eigenvalue"]);
    ex.iter().enumerate().for_each(|(k, e)| tx.push(vec![k as f64, *e]));
    let mut tw = Table::new("kw_eigenvalues", &["index", "eigenvalue"]);
    ew.iter().enumerate().for_each(|(k, e)| tw.push(vec![k as f64, *e]));
    b.tables.extend([tx, tw]);
    Ok(())
}

fn canonical(ctx: &Setup, b: &mut ReportBundle) -> Result<(), CliError> {
    let policy = ctx.config.truncation.policy();
    let params = ctx.config.canonical_params();
    let (spec, step) = if ctx.config.canonical.solve_alpha {
        let sol = solve_alpha_for_chi(&ctx.spec, &ctx.w_o, &ctx.data, params.eta, params.chi, params.delta, params.form).context("alpha solver")?;
        b.set("solved_alpha", &sol.spec.alpha);
        b.set("solver_sweeps", sol.sweeps);
        (sol.spec, sol.step)
    } else {
        (ctx.spec.clone(), ctx.step_at(params.eta)?)
    };
    let res = canonical_construct_with(&spec, &ctx.w_o, &step, params, &policy).context("canonical construction")?;
    let rep = verify_canonical(&spec, &ctx.w_o, &step, &res, &ctx.data.inputs, &policy).context("canonical verification")?;
    b.set("nu", res.nu);
    b.set("nu_alt", res.nu_alt);
    b.set("lambda", res.lambda);
    b.set("lambda_normalised", res.lambda_normalised);
    b.set("x_top", res.x_top);
    b.set("eps_psi", &res.eps_psi);
    b.set("eps_phi", &res.eps_phi);
    b.set("eps_phi_clamped", &res.eps_phi_clamped);
    b.set(
        "caps",
        res.caps.iter().map(|c| json!({"layer": c.layer, "value": c.value, "cap": c.cap, "margin": c.margin})).collect::<Vec<_>>(),
    );
    b.set("max_chi_residual", res.max_chi_residual());
    b.set("mu", &res.scaling.mu);
    b.set("omega", &res.scaling.omega);
    b.set("tolerance", CANONICAL_TOLERANCE);
    b.set("max_rel_deviation", rep.max_rel_deviation);
    b.set("layer_deviation", &rep.layer_deviation);
    b.set("psi_norm_sq", rep.psi_norm_sq);
    b.set("psi_cap", rep.psi_cap);
    b.set("psi_within_cap", rep.psi_within_cap);
    b.set("phi_cap", rep.phi_cap);
    b.set("phi_verdict_pass", rep.phi_verdict.pass);
    if let Some(c) = &rep.phi_certificate {
        b.set("phi_certificate", json!({"max_value": c.max_value, "cap": c.cap, "violations": c.violations, "samples": c.samples}));
    }
    let pass = rep.max_rel_deviation <= CANONICAL_TOLERANCE;
    b.set("pass", pass);
    b.require(pass);
    Ok(())
}

fn rademacher(ctx: &Setup, b: &mut ReportBundle) -> Result<(), CliError> {
    let budgets = ctx.config.budgets;
    let steps: Vec<WeightStep> = ctx.trajectory()?.into_iter().map(|(_, s)| s).collect();
    let rep = rademacher_bound(&ctx.spec, &steps, budgets.eps, budgets.chi, budgets.delta, ctx.data.len()).context("Rademacher bound")?;
    b.set("n", rep.n);
    b.set("steps", steps.len());
    b.set("step_cap", rep.b);
    b.set("sigma_bar", rep.sigma_bar);
    b.set("width", rep.width);
    b.set("step_bounds", &rep.step_bounds);
    b.set("cumulative", rep.cumulative);
    b.set("small_eta", &rep.small_eta);
    let mut table = Table::new("per_step", &["step", "t_inf", "bound", "small_eta"]);
    for k in 0..rep.step_bounds.len() {
        table.push(vec![k as f64, rep.t_inf[k], rep.step_bounds[k], rep.small_eta[k]]);
    }
    b.tables.push(table);
    if let Some(ex) = ctx.config.rademacher.example {
        let r = two_layer_tanh_example(&ex.into()).context("two-layer example")?;
        b.set(
            "example",
            json!({
                "eta": r.eta,
                "t0_sq_bound": r.t0_sq_bound,
                "t1_sq_bound": r.t1_sq_bound,
                "b1_sq": r.b1_sq,
                "sigma_bar": r.sigma_bar,
                "final_bound": r.final_bound,
                "final_bound_direct": r.final_bound_direct,
            }),
        );
    }
    Ok(())
}

fn sweep(ctx: &Setup, b: &mut ReportBundle) -> Result<(), CliError> {
    let sw = ctx.config.sweep.as_ref().ok_or_else(|| CliError::Config("sweep requires a `sweep` section".into()))?;
    let budgets = ctx.config.budgets;
    let policy = ctx.config.truncation.policy();
    let n = ctx.data.len();
    let mut failures = Vec::new();
    // Grid points are evaluated in order, so the table is sorted by grid index.
    let mut fail = |k: usize, v: f64, e: CliError| {
        failures.push(json!({"index": k, "value": v, "error": e.to_string()}));
        f64::NAN
    };
    let table = match sw.axis {
        SweepAxis::LambdaPrime => {
            let mut t = Table::new("lambda_prime", &["x", "lambda_prime"]);
            for (k, &x) in sw.values.iter().enumerate() {
                let y = lambda_normalised(x).context("normalised regulariser").unwrap_or_else(|e| fail(k, x, e));
                t.push(vec![x, y]);
            }
            t
        }
        SweepAxis::Eta => {
            let mut t = Table::new("eta", &["eta", "nu", "lambda", "lambda_prime", "bound"]);
            for (k, &eta) in sw.values.iter().enumerate() {
                let row = (|| -> Result<Vec<f64>, CliError> {
                    let step = ctx.step_at(eta)?;
                    let params = rkbsnet_core::canonical::CanonicalParams { eta, ..ctx.config.canonical_params() };
                    let res = canonical_construct_with(&ctx.spec, &ctx.w_o, &step, params, &policy).context("canonical construction")?;
                    let bound = rademacher_step_bound(&ctx.spec, &step, budgets.eps, budgets.chi, budgets.delta, n).context("Rademacher bound")?;
                    Ok(vec![eta, res.nu, lambda(eta, res.nu), res.lambda_normalised, bound.cumulative])
                })();
                t.push(row.unwrap_or_else(|e| {
                    let nan = fail(k, eta, e);
                    vec![eta, nan, nan, nan, nan]
                }));
            }
            t
        }
        SweepAxis::N => {
            let step = ctx.step_at(ctx.config.eta)?;
            let mut t = Table::new("n", &["n", "bound"]);
            for (k, &v) in sw.values.iter().enumerate() {
                let bound = if v >= 1.0 && v.fract() == 0.0 {
                    rademacher_step_bound(&ctx.spec, &step, budgets.eps, budgets.chi, budgets.delta, v as usize).map(|r| r.cumulative).context("Rademacher bound")
                } else {
                    Err(CliError::Config(format!("sample count {v} is not a positive integer")))
                };
                t.push(vec![v, bound.unwrap_or_else(|e| fail(k, v, e))]);
            }
            t
        }
        SweepAxis::H0 => {
            let ex = ctx.config.rademacher.example.ok_or_else(|| CliError::Config("the h0 sweep requires rademacher.example".into()))?;
            let mut t = Table::new("h0", &["h0", "final_bound", "final_bound_direct", "eta"]);
            for (k, &h0) in sw.values.iter().enumerate() {
                let mut e: rkbsnet_core::complexity::TwoLayerExample = ex.into();
                e.h0 = h0;
                match two_layer_tanh_example(&e).context("two-layer example") {
                    Ok(r) => t.push(vec![h0, r.final_bound, r.final_bound_direct, r.eta]),
                    Err(err) => {
                        let nan = fail(k, h0, err);
                        t.push(vec![h0, nan, nan, nan]);
                    }
                }
            }
            t
        }
        SweepAxis::StepScale => {
            let step = ctx.step_at(ctx.config.eta)?;
            let params = ctx.config.canonical_params();
            let mut t = Table::new("step_scale", &["scale", "x", "lambda_prime", "nu", "bound"]);
            for (k, &s) in sw.values.iter().enumerate() {
                let scaled = step.scaled(s);
                let row = (|| -> Result<Vec<f64>, CliError> {
                    let res = canonical_construct_with(&ctx.spec, &ctx.w_o, &scaled, params, &policy).context("canonical construction")?;
                    let bound = rademacher_step_bound(&ctx.spec, &scaled, budgets.eps, budgets.chi, budgets.delta, n).context("Rademacher bound")?;
                    Ok(vec![s, res.x_top, res.lambda_normalised, res.nu, bound.cumulative])
                })();
                t.push(row.unwrap_or_else(|e| {
                    let nan = fail(k, s, e);
                    vec![s, nan, nan, nan, nan]
                }));
            }
            t
        }
    };
    b.set("axis", sw.axis);
    b.set("points", table.rows.len());
    b.set("failures", failures);
    b.tables.push(table);
    Ok(())
}
