//! Gradient checks of the tape operations and of the model-level objectives,
//! against central finite differences.

use std::str::FromStr;

use rand::Rng as _;

use crate::autodiff::checks::{op_checks, OpCheck};
use crate::autodiff::{check_gradient, Tape, Var};
use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::measure::{rng_from_seed, TaskKind};
use crate::net::{encode_source, init_params, ModelConfig, ModelParams};
use crate::solver::{inner_objective, FlowConfig};
use crate::tensor::Tensor;
use crate::train::{phantom_backward, SampleInputs, Target, TrainConfig};

pub const DEFAULT_TOL: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Every op plus the model objectives on a small network.
    Tiny,
    /// As `Tiny`, plus the objectives on the desk-size network.
    Full,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "full" => Ok(Preset::Full),
            other => Err(Error::Config(format!("unknown gradcheck preset `{other}`"))),
        }
    }
}

fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_from_seed(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Small network whose bilinear and coupling weights are randomized so that
/// no parameter has an identically zero gradient.
pub fn tiny_params(classes: usize, coupling: bool, seed: u64) -> ModelParams {
    let mut cfg = ModelConfig {
        latent_dim: 8,
        bilinear_dim: 4,
        ..ModelConfig::desk(2)
    }
    .with_classes(classes);
    cfg.coupling = coupling;
    randomized(init_params(&cfg, seed).expect("valid config"), seed)
}

fn randomized(mut params: ModelParams, seed: u64) -> ModelParams {
    let mut rng = rng_from_seed(seed ^ 0x5eed);
    params.update(|name, t| {
        if name.starts_with("coupling.") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
        }
    });
    params
}

fn with_tensors(params: &ModelParams, names: &[String], values: &[Tensor]) -> Result<ModelParams> {
    let mut p = params.clone();
    for (n, v) in names.iter().zip(values) {
        p.set(n, v.clone())?;
    }
    Ok(p)
}

/// `G(Z) = ½MMD²(Z, F_θ(Z, X))` differentiated in `Z`, `X` and every parameter.
pub fn check_inner_objective(params: &ModelParams, n: usize, m: usize, seed: u64, tol: f64) -> Result<Vec<OpCheck>> {
    let p_dim = params.config.latent_dim;
    let z = uniform(&[n, p_dim], seed);
    let x = uniform(&[m, params.config.data_dim], seed + 1);
    let pins: Vec<bool> = (0..n).map(|i| i == 0).collect();
    let mask = vec![true; n];
    let x_mask = vec![true; m];
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut inputs = vec![z, x];
    inputs.extend(names.iter().map(|k| params.get(k).expect("listed").clone()));

    let build = |tape: &mut Tape, vals: &[Tensor], leaves: bool| -> Result<(Var, Vec<Var>)> {
        let reg = |tape: &mut Tape, t: &Tensor| if leaves { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        let zv = reg(tape, &vals[0]);
        let xv = reg(tape, &vals[1]);
        let pp = with_tensors(params, &names, &vals[2..])?;
        let bound = pp.bind(tape, leaves);
        let src = encode_source(tape, &bound, &pp, xv, &x_mask)?;
        let (g, _) = inner_objective(tape, &bound, &pp, &src, zv, &mask, &pins, &KernelSpec::Riesz)?;
        let mut vars = vec![zv, xv];
        vars.extend(names.iter().map(|k| bound.get(k).expect("bound")));
        Ok((g, vars))
    };
    let report = check_gradient(
        &inputs,
        tol,
        |vals| {
            let mut t = Tape::new();
            let (g, _) = build(&mut t, vals, false)?;
            Ok(t.value(g).item())
        },
        |vals| {
            let mut t = Tape::new();
            let (g, vars) = build(&mut t, vals, true)?;
            t.grad_values(g, &vars)
        },
    )?;
    Ok(split_report("G", &["Z", "X"], &names, report))
}

fn split_report(prefix: &str, heads: &[&str], names: &[String], report: crate::autodiff::GradcheckReport) -> Vec<OpCheck> {
    let labels = heads.iter().map(|h| h.to_string()).chain(names.iter().cloned());
    labels
        .zip(&report.per_input)
        .map(|(label, &e)| OpCheck {
            name: format!("{prefix} / {label}"),
            report: crate::autodiff::GradcheckReport {
                max_rel_err: e,
                tol: report.tol,
                passed: e <= report.tol,
                per_input: vec![e],
            },
        })
        .collect()
}

/// Phantom loss at a fixed `Z*` differentiated in every parameter; this is
/// the second-order path used in training.
pub fn check_phantom(params: &ModelParams, task: TaskKind, n: usize, m: usize, seed: u64, tol: f64) -> Result<Vec<OpCheck>> {
    let p_dim = params.config.latent_dim;
    let d = params.config.data_dim;
    let cfg = TrainConfig {
        task,
        flow: FlowConfig {
            iterations: 0,
            step_size: 0.5,
            ..FlowConfig::default()
        },
        ..TrainConfig::default()
    };
    let pins: Vec<bool> = match task {
        TaskKind::Classify => vec![false; n],
        TaskKind::Complete => (0..n).map(|i| i < n / 2).collect(),
    };
    let inputs = SampleInputs {
        x: uniform(&[m, d], seed + 1),
        x_mask: vec![true; m],
        z0: uniform(&[n, p_dim], seed),
        z_mask: vec![true; n],
        pins,
    };
    let target = match task {
        TaskKind::Classify => Target::Class(1),
        TaskKind::Complete => Target::Cloud(crate::measure::DiscreteMeasure::new(uniform(&[n + 1, d], seed + 2))?),
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let values: Vec<Tensor> = names.iter().map(|k| params.get(k).expect("listed").clone()).collect();
    let report = check_gradient(
        &values,
        tol,
        |vals| {
            let pp = with_tensors(params, &names, vals)?;
            Ok(phantom_backward(&pp, &cfg, &inputs, &inputs.z0, &target)?.0)
        },
        |vals| {
            let pp = with_tensors(params, &names, vals)?;
            let (_, grads, _) = phantom_backward(&pp, &cfg, &inputs, &inputs.z0, &target)?;
            Ok(names.iter().map(|k| grads[k].clone()).collect())
        },
    )?;
    let prefix = match task {
        TaskKind::Classify => "phantom classify",
        TaskKind::Complete => "phantom complete",
    };
    Ok(split_report(prefix, &[], &names, report))
}

/// Runs the whole suite.
pub fn run(preset: Preset, tol: f64) -> Result<Vec<OpCheck>> {
    let mut out = op_checks(tol)?;
    out.extend(check_inner_objective(&tiny_params(3, false, 1), 6, 5, 10, tol)?);
    out.extend(check_phantom(&tiny_params(3, false, 2), TaskKind::Classify, 4, 5, 20, tol)?);
    out.extend(check_phantom(&tiny_params(0, true, 3), TaskKind::Complete, 4, 3, 30, tol)?);
    if preset == Preset::Full {
        let desk = randomized(init_params(&ModelConfig::desk(2).with_classes(3), 4)?, 4);
        out.extend(check_inner_objective(&desk, 6, 8, 40, tol)?);
    }
    Ok(out)
}
