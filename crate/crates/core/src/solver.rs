//! Inner loop: Wasserstein gradient descent on `G(Z) = ½MMD²(Z, F_θ(Z, X))`.
//!
//! One step moves every free active particle by
//! `−η γ^k N ∂G/∂zᵢ`, where `N ∂G/∂zᵢ` is the Wasserstein gradient of `G`
//! at `zᵢ`. Pinned and padded rows never move.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernel::{mmd_sq, mmd_sq_on_tape, FlowTarget, KernelSpec, MmdObjective, PushforwardMap};
use crate::measure::{save_points_csv, DiscreteMeasure, Sample};
use crate::net::core::EncodedSource;
use crate::net::{encode_source, latent_forward, Bound, ModelParams, Source};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    /// Wasserstein gradient descent on the inner objective.
    #[default]
    Wgd,
    /// Plain iteration `Z ← F_θ(Z, X)`.
    FixedPoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub step_decay: f64,
    /// Multiply the autodiff gradient by the number of active particles.
    pub rescale_by_n: bool,
    /// Record a trace row every this many steps; `0` disables the trace.
    pub record_every: usize,
    /// Iterations (counted in completed updates) at which to keep a copy of the particles.
    pub snapshot_at: Vec<usize>,
    pub solver: SolverKind,
    pub kernel: KernelSpec,
    /// Stop early once the residual falls below this value.
    pub tolerance: Option<f64>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            iterations: 200,
            step_size: 5.0,
            step_decay: 1.0,
            rescale_by_n: true,
            record_every: 1,
            snapshot_at: Vec::new(),
            solver: SolverKind::Wgd,
            kernel: KernelSpec::Riesz,
            tolerance: None,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size >= 0.0) || !self.step_size.is_finite() {
            return Err(Error::Config(format!("step_size must be ≥ 0, got {}", self.step_size)));
        }
        if !(self.step_decay > 0.0 && self.step_decay <= 1.0) {
            return Err(Error::Config(format!(
                "step_decay must be in (0, 1], got {}",
                self.step_decay
            )));
        }
        Ok(())
    }

    /// `η γ^step`.
    pub fn effective_step(&self, step: usize) -> f64 {
        self.step_size * self.step_decay.powi(step as i32)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlowTrace {
    pub steps: Vec<usize>,
    /// Value of the objective being descended.
    pub objective: Vec<f64>,
    /// `½MMD²` between the particles and their target, recomputed directly.
    pub residual: Vec<f64>,
    pub snapshots: Vec<(usize, Tensor)>,
}

impl FlowTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    fn record(&mut self, step: usize, objective: f64, residual: f64) {
        self.steps.push(step);
        self.objective.push(objective);
        self.residual.push(residual);
    }

    /// `step,objective,residual`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,objective,residual\n");
        for i in 0..self.steps.len() {
            s.push_str(&format!(
                "{},{:?},{:?}\n",
                self.steps[i], self.objective[i], self.residual[i]
            ));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// One points CSV per snapshot, named `{prefix}_{step:05}.csv`.
    pub fn write_snapshots(&self, dir: impl AsRef<Path>, prefix: &str, mask: &[bool]) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (step, pts) in &self.snapshots {
            let m = DiscreteMeasure::with_mask(pts.clone(), mask.to_vec())?;
            let s = Sample {
                id: format!("step-{step}"),
                input: m,
                label: None,
                target: None,
            };
            save_points_csv(&[s], dir.join(format!("{prefix}_{step:05}.csv")))?;
        }
        Ok(())
    }
}

/// Everything the inner loop needs about one sample: the parameters, the
/// encoded input, and the latent masks.
#[derive(Clone, Debug)]
pub struct InnerProblem<'a> {
    pub params: &'a ModelParams,
    pub source: EncodedSource,
    pub z_mask: Vec<bool>,
    pub pins: Vec<bool>,
    pub kernel: KernelSpec,
}

impl<'a> InnerProblem<'a> {
    pub fn new(
        params: &'a ModelParams,
        x: &Tensor,
        x_mask: &[bool],
        z_mask: &[bool],
        pins: &[bool],
        kernel: KernelSpec,
    ) -> Result<Self> {
        if pins.len() != z_mask.len() {
            return Err(Error::shape(format!(
                "pin mask of {} for {} latent rows",
                pins.len(),
                z_mask.len()
            )));
        }
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let source = encode_source(&mut tape, &p, params, xv, x_mask)?.freeze(&tape);
        Ok(InnerProblem {
            params,
            source,
            z_mask: z_mask.to_vec(),
            pins: pins.to_vec(),
            kernel,
        })
    }

    pub fn n_active(&self) -> usize {
        self.z_mask.iter().filter(|&&m| m).count()
    }

    /// Rows allowed to move.
    pub fn free(&self) -> Vec<bool> {
        self.z_mask
            .iter()
            .zip(&self.pins)
            .map(|(&m, &p)| m && !p)
            .collect()
    }

    /// `F_θ(Z, X)`.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let src = self.source.attach(&mut tape);
        let zv = tape.constant(z.clone());
        let f = latent_forward(&mut tape, &p, self.params, zv, &self.z_mask, &self.pins, &src)?;
        Ok(tape.value(f).clone())
    }

    /// `½MMD²(Z, F_θ(Z, X))` computed directly from the kernel module.
    pub fn residual(&self, z: &Tensor) -> Result<f64> {
        let f = self.forward(z)?;
        self.residual_against(z, &f)
    }

    fn residual_against(&self, z: &Tensor, f: &Tensor) -> Result<f64> {
        let a = DiscreteMeasure::with_mask(z.clone(), self.z_mask.clone())?;
        let b = DiscreteMeasure::with_mask(f.clone(), self.z_mask.clone())?;
        Ok(0.5 * mmd_sq(&self.kernel, &a, &b)?)
    }

    /// `G(Z)`, `∂G/∂Z` (before rescaling and masking) and `F_θ(Z, X)`.
    pub fn objective_and_gradient(&self, z: &Tensor) -> Result<(f64, Tensor, Tensor)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let src = self.source.attach(&mut tape);
        let zv = tape.leaf(z.clone());
        let (g, f) = inner_objective(&mut tape, &p, self.params, &src, zv, &self.z_mask, &self.pins, &self.kernel)?;
        let grad = tape.grad_values(g, &[zv])?.pop().expect("one input");
        Ok((tape.value(g).item(), grad, tape.value(f).clone()))
    }

    /// The update direction `N ∂G/∂Z` restricted to free rows.
    pub fn step_direction(&self, z: &Tensor, rescale_by_n: bool) -> Result<(f64, Tensor, Tensor)> {
        let (g, mut grad, f) = self.objective_and_gradient(z)?;
        let scale = if rescale_by_n { self.n_active() as f64 } else { 1.0 };
        let free = self.free();
        let d = grad.cols();
        for (e, v) in grad.data_mut().iter_mut().enumerate() {
            *v = if free[e / d] { *v * scale } else { 0.0 };
        }
        Ok((g, grad, f))
    }
}

/// `Z ↦ F_θ(Z, X)` as a particle map. It acts row by row only when the
/// network is built with `pushforward_only`.
impl PushforwardMap for InnerProblem<'_> {
    fn apply(&self, points: &Tensor) -> Result<Tensor> {
        self.forward(points)
    }

    fn vjp(&self, points: &Tensor, v: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let src = self.source.attach(&mut tape);
        let zv = tape.leaf(points.clone());
        let f = latent_forward(&mut tape, &p, self.params, zv, &self.z_mask, &self.pins, &src)?;
        let s = tape.mul_const(f, v.clone())?;
        let s = tape.sum(s);
        Ok(tape.grad_values(s, &[zv])?.pop().expect("one input"))
    }
}

/// `G = ½MMD²(Z, F(Z))` on a tape, returning `(G, F(Z))`.
#[allow(clippy::too_many_arguments)]
pub fn inner_objective(
    tape: &mut Tape,
    p: &Bound,
    params: &ModelParams,
    src: &Source,
    z: Var,
    z_mask: &[bool],
    pins: &[bool],
    kernel: &KernelSpec,
) -> Result<(Var, Var)> {
    let f = latent_forward(tape, p, params, z, z_mask, pins, src)?;
    let m = mmd_sq_on_tape(tape, kernel, z, z_mask, f, z_mask)?;
    Ok((tape.scale(m, 0.5), f))
}

fn check_finite(t: &Tensor, step: usize) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteGradient { step })
    }
}

/// One Wasserstein gradient step.
pub fn wgf_step(problem: &InnerProblem, z: &Tensor, cfg: &FlowConfig, step: usize) -> Result<Tensor> {
    let (_, dir, _) = problem.step_direction(z, cfg.rescale_by_n)?;
    check_finite(&dir, step)?;
    let eta = cfg.effective_step(step);
    Ok(z.zip_map(&dir, |a, g| a - eta * g))
}

/// Runs the inner loop from `z0`.
pub fn solve(problem: &InnerProblem, z0: &Tensor, cfg: &FlowConfig) -> Result<(Tensor, FlowTrace)> {
    cfg.validate()?;
    let mut z = z0.clone();
    let mut trace = FlowTrace::default();
    for step in 0..cfg.iterations {
        if cfg.snapshot_at.contains(&step) {
            trace.snapshots.push((step, z.clone()));
        }
        let record = cfg.record_every > 0 && step % cfg.record_every == 0;
        match cfg.solver {
            SolverKind::Wgd => {
                let (g, dir, f) = problem.step_direction(&z, cfg.rescale_by_n)?;
                check_finite(&dir, step)?;
                let r = problem.residual_against(&z, &f)?;
                if record {
                    trace.record(step, g, r);
                }
                if cfg.tolerance.is_some_and(|t| r <= t) {
                    return Ok((z, trace));
                }
                let eta = cfg.effective_step(step);
                z = z.zip_map(&dir, |a, g| a - eta * g);
            }
            SolverKind::FixedPoint => {
                let f = problem.forward(&z)?;
                check_finite(&f, step)?;
                let r = problem.residual_against(&z, &f)?;
                if record {
                    trace.record(step, r, r);
                }
                if cfg.tolerance.is_some_and(|t| r <= t) {
                    return Ok((z, trace));
                }
                z = f;
            }
        }
    }
    if cfg.snapshot_at.contains(&cfg.iterations) {
        trace.snapshots.push((cfg.iterations, z.clone()));
    }
    Ok((z, trace))
}

/// `steps` differentiable inner updates starting from `z0`, all on `tape`.
///
/// With `z0` detached and `steps == 1` this is the phantom-gradient graph;
/// with `steps == L` and `z0` the initial latent it is full unrolled backprop.
#[allow(clippy::too_many_arguments)]
pub fn unrolled_steps(
    tape: &mut Tape,
    p: &Bound,
    params: &ModelParams,
    src: &Source,
    z0: Var,
    z_mask: &[bool],
    pins: &[bool],
    cfg: &FlowConfig,
    first_step: usize,
    steps: usize,
) -> Result<Var> {
    let n = z_mask.iter().filter(|&&m| m).count() as f64;
    let d = tape.value(z0).cols();
    let free = Tensor::from_fn(tape.shape(z0), |e| {
        if z_mask[e / d] && !pins[e / d] {
            1.0
        } else {
            0.0
        }
    });
    // the step needs ∂G/∂Z even when the starting point is a constant
    let mut z = if tape.requires_grad(z0) {
        z0
    } else {
        let v = tape.shared(z0);
        tape.leaf(v)
    };
    for k in 0..steps {
        let step = first_step + k;
        let (g, _) = inner_objective(tape, p, params, src, z, z_mask, pins, &cfg.kernel)?;
        let gz = tape.grad(g, &[z])?[0];
        check_finite(tape.value(gz), step)?;
        let gz = tape.mul_const(gz, free.clone())?;
        let scale = cfg.effective_step(step) * if cfg.rescale_by_n { n } else { 1.0 };
        let delta = tape.scale(gz, scale);
        z = tape.sub(z, delta)?;
    }
    Ok(z)
}

/// Inner loop with the whole trajectory kept on `tape` for exact backprop.
#[allow(clippy::too_many_arguments)]
pub fn solve_unrolled(
    tape: &mut Tape,
    p: &Bound,
    params: &ModelParams,
    x: Var,
    x_mask: &[bool],
    z0: Var,
    z_mask: &[bool],
    pins: &[bool],
    cfg: &FlowConfig,
) -> Result<Var> {
    let src = encode_source(tape, p, params, x, x_mask)?;
    unrolled_steps(tape, p, params, &src, z0, z_mask, pins, cfg, 0, cfg.iterations)
}

/// `½MMD²(Z, F_θ(Z, X))`.
pub fn residual(
    params: &ModelParams,
    z: &Tensor,
    z_mask: &[bool],
    x: &Tensor,
    x_mask: &[bool],
    pins: &[bool],
) -> Result<f64> {
    InnerProblem::new(params, x, x_mask, z_mask, pins, KernelSpec::Riesz)?.residual(z)
}

/// Particle descent on `½MMD²` against a fixed measure or the image under a fixed map.
pub fn fixed_target_flow(
    mu0: &DiscreteMeasure,
    target: FlowTarget<'_>,
    kernel: KernelSpec,
    cfg: &FlowConfig,
) -> Result<(DiscreteMeasure, FlowTrace)> {
    cfg.validate()?;
    let objective = MmdObjective { kernel, target };
    let mask = mu0.mask().to_vec();
    let mut mu = mu0.clone();
    let mut trace = FlowTrace::default();
    for step in 0..cfg.iterations {
        if cfg.snapshot_at.contains(&step) {
            trace.snapshots.push((step, mu.points().clone()));
        }
        if cfg.record_every > 0 && step % cfg.record_every == 0 {
            let v = objective.value(&mu)?;
            trace.record(step, v, v);
        }
        let g = objective.wasserstein_gradient(&mu)?;
        check_finite(&g, step)?;
        let eta = cfg.effective_step(step);
        let next = mu.points().zip_map(&g, |a, b| a - eta * b);
        mu = DiscreteMeasure::with_mask(next, mask.clone())?;
    }
    if cfg.snapshot_at.contains(&cfg.iterations) {
        trace.snapshots.push((cfg.iterations, mu.points().clone()));
    }
    if cfg.record_every > 0 && cfg.iterations % cfg.record_every == 0 {
        let v = objective.value(&mu)?;
        trace.record(cfg.iterations, v, v);
    }
    Ok((mu, trace))
}
