//! Outer training loop: latent initialization, inner solves, phantom-gradient
//! backward, Adam with step decay, and evaluation.

mod adam;
mod loss;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{AdamConfig, OptimizerState};
pub use loss::{cross_entropy_on_tape, loss_classify, loss_complete};

use crate::autodiff::{Tape, Var};
use crate::diagnostics::{
    eps_t, grad_discrepancy_ratio, pl_ratio, theorem_ratio, w2_distance, DiagnosticRow, DiagnosticSeries,
};
use crate::error::{Error, Result};
use crate::kernel::{mmd_sq_on_tape, KernelSpec};
use crate::measure::{
    add_free_particles, add_noise, derive_seed, make_partial, rng_from_seed, DiscreteMeasure, Sample, TaskKind,
};
use crate::net::{classify_head, coupling_forward, coupling_inverse_on_tape, encode_source, Bound, ModelParams};
use crate::solver::{solve, unrolled_steps, FlowConfig, InnerProblem};
use crate::tensor::Tensor;

const TAG_PREPARE: u64 = 1;
const TAG_TRAIN_LATENT: u64 = 2;
const TAG_EVAL_LATENT: u64 = 3;
const TAG_SHUFFLE: u64 = 4;
const TAG_MONITOR: u64 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Fractions of `epochs` after which the learning rate is multiplied by `lr_factor`.
    pub lr_drops: Vec<f64>,
    pub lr_factor: f64,
    /// Latent particle count `J` for classification.
    pub latent_particles: usize,
    /// Free particles added to a partial cloud, as a fraction of its size.
    pub free_fraction: f64,
    /// Fraction of input particles replaced by noise (completion).
    pub noise_fraction: f64,
    /// Removal radius used to cut partial clouds (completion).
    pub partial_radius: f64,
    /// Scales the step of the phantom update.
    pub phantom_damping: f64,
    /// Global-norm gradient clip; `None` disables it.
    pub grad_clip: Option<f64>,
    pub flow: FlowConfig,
    pub seed: u64,
    /// Run the monitors every this many outer steps; `0` disables them.
    pub diagnostics_every: usize,
    /// Random measures per PL estimate.
    pub pl_samples: usize,
    /// Save a checkpoint every this many epochs; `0` keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: TaskKind::Classify,
            epochs: 10,
            batch_size: 64,
            adam: AdamConfig::default(),
            lr_drops: vec![0.4, 0.8],
            lr_factor: 0.1,
            latent_particles: 10,
            free_fraction: 0.275,
            noise_fraction: 0.05,
            partial_radius: 0.6,
            phantom_damping: 1.0,
            grad_clip: None,
            flow: FlowConfig::default(),
            seed: 0,
            diagnostics_every: 0,
            pl_samples: 8,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, v) in [
            ("free_fraction", self.free_fraction),
            ("noise_fraction", self.noise_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if self.lr_drops.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad(format!("lr_drops must lie in [0, 1]: {:?}", self.lr_drops));
        }
        if self.task == TaskKind::Classify && self.latent_particles == 0 {
            return bad("latent_particles must be at least 1".into());
        }
        if self.partial_radius < 0.0 {
            return bad(format!("partial_radius must be ≥ 0, got {}", self.partial_radius));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive".into());
        }
        self.adam.validate()?;
        self.flow.validate()
    }

    /// Learning rate in effect during `epoch` (counted from 0).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self
            .lr_drops
            .iter()
            .filter(|&&f| epoch >= (f * self.epochs as f64).floor() as usize)
            .count();
        self.adam.lr * self.lr_factor.powi(drops as i32)
    }

    /// The inner-loop settings for the single phantom update after `L` steps.
    fn phantom_flow(&self) -> FlowConfig {
        FlowConfig {
            step_size: self.flow.step_size * self.phantom_damping,
            ..self.flow.clone()
        }
    }
}

/// What the loss compares against.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    /// Ground-truth cloud for completion.
    Cloud(DiscreteMeasure),
}

/// A sample turned into network inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    /// Network input `X` (the partial cloud for completion), compact.
    pub input: DiscreteMeasure,
    pub target: Target,
    /// Ground-truth particles cut from the cloud, when known.
    pub removed: Option<DiscreteMeasure>,
}

/// Builds network inputs and targets.
///
/// Classification uses the input as is. Completion with an explicit target
/// uses the input as the partial cloud; otherwise the input is the full cloud,
/// noise is injected, and a partial cloud is cut from it.
pub fn prepare(samples: &[Sample], cfg: &TrainConfig) -> Result<Vec<PreparedSample>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let seed = derive_seed(cfg.seed, &[TAG_PREPARE, i as u64]);
            match cfg.task {
                TaskKind::Classify => {
                    let label = s
                        .label
                        .ok_or_else(|| Error::Schema(format!("sample `{}` has no label", s.id)))?;
                    Ok(PreparedSample {
                        id: s.id.clone(),
                        input: s.input.compact(),
                        target: Target::Class(label),
                        removed: None,
                    })
                }
                TaskKind::Complete => match &s.target {
                    Some(t) => Ok(PreparedSample {
                        id: s.id.clone(),
                        input: s.input.compact(),
                        target: Target::Cloud(t.compact()),
                        removed: None,
                    }),
                    None => {
                        let truth = s.input.compact();
                        let noisy = add_noise(&truth, cfg.noise_fraction, seed);
                        let partial = make_partial(&noisy, cfg.partial_radius, seed ^ 1)?;
                        let gone: Vec<usize> = (0..truth.rows()).filter(|&r| !partial.mask()[r]).collect();
                        let removed = DiscreteMeasure::new(truth.points().select_rows(&gone))?;
                        Ok(PreparedSample {
                            id: s.id.clone(),
                            input: partial.compact(),
                            target: Target::Cloud(truth),
                            removed: Some(removed),
                        })
                    }
                },
            }
        })
        .collect()
}

/// Initial latent and pin mask for one sample.
///
/// Classification draws `J × p` standard normals with nothing pinned.
/// Completion appends free particles to the partial input, zero-pads to `p`
/// columns and maps through the coupling layer; input rows are pinned.
pub fn latent_init(
    sample: &PreparedSample,
    params: &ModelParams,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Tensor, Vec<bool>)> {
    let p = params.config.latent_dim;
    match cfg.task {
        TaskKind::Classify => {
            let mut rng = rng_from_seed(seed);
            let j = cfg.latent_particles;
            let z = Tensor::from_fn(&[j, p], |_| StandardNormal.sample(&mut rng));
            Ok((z, vec![false; j]))
        }
        TaskKind::Complete => {
            let (tilde, pins) = add_free_particles(&sample.input, cfg.free_fraction, seed);
            let z = coupling_forward(params, &tilde.widened(p))?;
            Ok((z, pins))
        }
    }
}

fn pad_rows(t: &Tensor, rows: usize) -> Tensor {
    if t.rows() == rows {
        return t.clone();
    }
    Tensor::vstack(&[t, &Tensor::zeros(&[rows - t.rows(), t.cols()])]).expect("same width")
}

fn pad_mask(m: &[bool], rows: usize) -> Vec<bool> {
    let mut out = m.to_vec();
    out.resize(rows, false);
    out
}

/// One sample laid out for a batch: inputs and latents padded with inactive rows.
#[derive(Clone, Debug)]
pub struct SampleInputs {
    pub x: Tensor,
    pub x_mask: Vec<bool>,
    pub z0: Tensor,
    pub z_mask: Vec<bool>,
    pub pins: Vec<bool>,
}

impl SampleInputs {
    pub fn new(sample: &PreparedSample, z0: Tensor, pins: Vec<bool>) -> Self {
        SampleInputs {
            x: sample.input.points().clone(),
            x_mask: sample.input.mask().to_vec(),
            z_mask: vec![true; z0.rows()],
            z0,
            pins,
        }
    }

    /// Pads `X` to `m_rows` and `Z` to `n_rows`.
    pub fn padded(&self, m_rows: usize, n_rows: usize) -> Self {
        SampleInputs {
            x: pad_rows(&self.x, m_rows),
            x_mask: pad_mask(&self.x_mask, m_rows),
            z0: pad_rows(&self.z0, n_rows),
            z_mask: pad_mask(&self.z_mask, n_rows),
            pins: pad_mask(&self.pins, n_rows),
        }
    }
}

/// Task head on a latent: logits for classification, the predicted cloud
/// (`q⁻¹(Z)` truncated to the data dimension) for completion.
fn head_on_tape(tape: &mut Tape, p: &Bound, params: &ModelParams, z: Var, z_mask: &[bool], target: &Target) -> Result<Var> {
    match target {
        Target::Class(_) => classify_head(tape, p, z, z_mask),
        Target::Cloud(_) => {
            let y = coupling_inverse_on_tape(tape, p, z, z_mask)?;
            tape.slice_cols(y, 0, params.config.data_dim)
        }
    }
}

fn loss_on_tape(tape: &mut Tape, head: Var, z_mask: &[bool], target: &Target) -> Result<Var> {
    match target {
        Target::Class(c) => cross_entropy_on_tape(tape, head, *c),
        Target::Cloud(t) => {
            let tv = tape.constant(t.points().clone());
            let m = mmd_sq_on_tape(tape, &KernelSpec::Riesz, head, z_mask, tv, t.mask())?;
            Ok(tape.scale(m, 0.5))
        }
    }
}

/// Result of one sample's forward and phantom backward.
#[derive(Clone, Debug)]
pub struct SampleOutcome {
    pub loss: f64,
    /// `½MMD²(Z*, F(Z*))` after the inner solve.
    pub residual: f64,
    pub grads: BTreeMap<String, Tensor>,
    /// Head output on `Z⁺`: logits or the predicted cloud.
    pub head: Tensor,
    pub z_star: Tensor,
}

/// Gradient of the task loss at the detached fixed point.
///
/// Builds `Z⁺ = Z* − η_eff N ∇_Z G(Z*)` on a fresh tape with the parameters as
/// leaves, applies the head and loss to `Z⁺`, and differentiates.
pub fn phantom_backward(
    params: &ModelParams,
    cfg: &TrainConfig,
    inputs: &SampleInputs,
    z_star: &Tensor,
    target: &Target,
) -> Result<(f64, BTreeMap<String, Tensor>, Tensor)> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, true);
    let x = tape.constant(inputs.x.clone());
    let src = encode_source(&mut tape, &p, params, x, &inputs.x_mask)?;
    let zs = tape.constant(z_star.clone());
    let flow = cfg.phantom_flow();
    let z_plus = unrolled_steps(
        &mut tape,
        &p,
        params,
        &src,
        zs,
        &inputs.z_mask,
        &inputs.pins,
        &flow,
        cfg.flow.iterations,
        1,
    )?;
    let head = head_on_tape(&mut tape, &p, params, z_plus, &inputs.z_mask, target)?;
    let loss = loss_on_tape(&mut tape, head, &inputs.z_mask, target)?;
    let (names, vars): (Vec<&str>, Vec<Var>) = p.iter().unzip();
    let grads = tape.grad_values(loss, &vars)?;
    let mut out = BTreeMap::new();
    for (name, g) in names.into_iter().zip(grads) {
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient { step: cfg.flow.iterations });
        }
        out.insert(name.to_string(), g);
    }
    Ok((tape.value(loss).item(), out, tape.value(head).clone()))
}

/// Inner solve followed by the phantom backward for one sample.
pub fn sample_step(params: &ModelParams, cfg: &TrainConfig, inputs: &SampleInputs, target: &Target) -> Result<SampleOutcome> {
    let problem = InnerProblem::new(params, &inputs.x, &inputs.x_mask, &inputs.z_mask, &inputs.pins, cfg.flow.kernel)?;
    let flow = FlowConfig {
        record_every: 0,
        snapshot_at: Vec::new(),
        ..cfg.flow.clone()
    };
    let (z_star, _) = solve(&problem, &inputs.z0, &flow)?;
    let residual = problem.residual(&z_star)?;
    let (loss, grads, head) = phantom_backward(params, cfg, inputs, &z_star, target)?;
    Ok(SampleOutcome {
        loss,
        residual,
        grads,
        head,
        z_star,
    })
}

/// Latent, prediction and loss without gradients (evaluation path).
pub fn predict(params: &ModelParams, cfg: &TrainConfig, inputs: &SampleInputs, target: &Target) -> Result<(f64, Tensor, Tensor)> {
    let problem = InnerProblem::new(params, &inputs.x, &inputs.x_mask, &inputs.z_mask, &inputs.pins, cfg.flow.kernel)?;
    let flow = FlowConfig {
        record_every: 0,
        snapshot_at: Vec::new(),
        ..cfg.flow.clone()
    };
    let (z_star, _) = solve(&problem, &inputs.z0, &flow)?;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let src = problem.source.attach(&mut tape);
    let zs = tape.constant(z_star.clone());
    let z_plus = unrolled_steps(
        &mut tape,
        &p,
        params,
        &src,
        zs,
        &inputs.z_mask,
        &inputs.pins,
        &cfg.phantom_flow(),
        cfg.flow.iterations,
        1,
    )?;
    let head = head_on_tape(&mut tape, &p, params, z_plus, &inputs.z_mask, target)?;
    let loss = loss_on_tape(&mut tape, head, &inputs.z_mask, target)?;
    Ok((tape.value(loss).item(), tape.value(head).clone(), z_star))
}

/// Aggregate of one batch.
#[derive(Clone, Debug)]
pub struct BatchOutcome {
    pub loss: f64,
    pub residual_mean: f64,
    /// Mean of the per-sample gradients.
    pub grads: BTreeMap<String, Tensor>,
    pub correct: Option<usize>,
    pub samples: Vec<SampleOutcome>,
    pub inputs: Vec<SampleInputs>,
}

/// Pads the batch to common row counts, runs every sample independently, and
/// reduces in sample order.
pub fn batch_step(params: &ModelParams, cfg: &TrainConfig, batch: &[(&PreparedSample, SampleInputs)]) -> Result<BatchOutcome> {
    let m_rows = batch.iter().map(|(_, s)| s.x.rows()).max().unwrap_or(0);
    let n_rows = batch.iter().map(|(_, s)| s.z0.rows()).max().unwrap_or(0);
    let inputs: Vec<SampleInputs> = batch.iter().map(|(_, s)| s.padded(m_rows, n_rows)).collect();
    let samples: Vec<SampleOutcome> = batch
        .par_iter()
        .zip(inputs.par_iter())
        .map(|((s, _), inp)| sample_step(params, cfg, inp, &s.target))
        .collect::<Result<_>>()?;
    let b = samples.len() as f64;
    let mut grads: BTreeMap<String, Tensor> = params
        .iter()
        .map(|(k, v)| (k.to_string(), Tensor::zeros(v.shape())))
        .collect();
    for s in &samples {
        for (k, g) in &s.grads {
            let acc = grads.get_mut(k).expect("same parameter set");
            acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, v)| *a += v);
        }
    }
    for g in grads.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v /= b);
    }
    let loss = samples.iter().map(|s| s.loss).sum::<f64>() / b;
    let residual_mean = samples.iter().map(|s| s.residual).sum::<f64>() / b;
    let correct = match cfg.task {
        TaskKind::Classify => Some(
            batch
                .iter()
                .zip(&samples)
                .filter(|((s, _), o)| matches!(s.target, Target::Class(c) if argmax(o.head.data()) == c))
                .count(),
        ),
        TaskKind::Complete => None,
    };
    Ok(BatchOutcome {
        loss,
        residual_mean,
        grads,
        correct,
        samples,
        inputs,
    })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// One row of the per-step training log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub residual_mean: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunRecord {
    pub rows: Vec<StepRow>,
    pub diagnostics: DiagnosticSeries,
}

impl RunRecord {
    /// `step,epoch,loss,residual_mean,grad_norm,lr[,accuracy]`.
    pub fn to_csv(&self) -> String {
        let with_acc = self.rows.iter().any(|r| r.accuracy.is_some());
        let mut s = String::from("step,epoch,loss,residual_mean,grad_norm,lr");
        s.push_str(if with_acc { ",accuracy\n" } else { "\n" });
        for r in &self.rows {
            let _ = write!(s, "{},{},{:?},{:?},{:?},{:?}", r.step, r.epoch, r.loss, r.residual_mean, r.grad_norm, r.lr);
            if with_acc {
                let _ = write!(s, ",{:?}", r.accuracy.unwrap_or(f64::NAN));
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads.values().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

/// Trains `params` on `data`.
///
/// When `out_dir` is given, checkpoints go to `out_dir/checkpoints`; a failed
/// run first saves the current parameters as `abort.json` there.
pub fn train(
    mut params: ModelParams,
    data: &[PreparedSample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(ModelParams, RunRecord)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let ckpt_dir = out_dir.map(|d| d.join("checkpoints"));
    if let Some(d) = &ckpt_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut record = RunRecord::default();
    let mut opt = OptimizerState::new(&params);
    let mut norms_sq = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_from_seed(derive_seed(cfg.seed, &[TAG_SHUFFLE, epoch as u64])));
        let lr = cfg.lr_at(epoch);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let result = train_step(&mut params, &mut opt, data, chunk, cfg, epoch, step, lr, &mut norms_sq, &mut record);
            if let Err(e) = result {
                if let Some(d) = &ckpt_dir {
                    params.save(d.join("abort.json"))?;
                }
                return Err(e);
            }
        }
        if let Some(d) = &ckpt_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                params.save(d.join(format!("epoch-{:03}.json", epoch + 1)))?;
            }
        }
    }
    if let Some(d) = &ckpt_dir {
        params.save(d.join("final.json"))?;
    }
    Ok((params, record))
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    data: &[PreparedSample],
    chunk: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
    step: usize,
    lr: f64,
    norms_sq: &mut Vec<f64>,
    record: &mut RunRecord,
) -> Result<()> {
    let batch: Vec<(&PreparedSample, SampleInputs)> = chunk
        .iter()
        .map(|&i| {
            let seed = derive_seed(cfg.seed, &[TAG_TRAIN_LATENT, epoch as u64, i as u64]);
            let (z0, pins) = latent_init(&data[i], params, cfg, seed)?;
            Ok((&data[i], SampleInputs::new(&data[i], z0, pins)))
        })
        .collect::<Result<_>>()?;
    let mut out = batch_step(params, cfg, &batch)?;
    if !out.loss.is_finite() {
        return Err(Error::NonFiniteGradient { step });
    }
    let grad_norm = global_norm(&out.grads);
    if let Some(c) = cfg.grad_clip {
        if grad_norm > c {
            let s = c / grad_norm;
            out.grads.values_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
        }
    }
    norms_sq.push(grad_norm * grad_norm);
    if cfg.diagnostics_every > 0 && step >= 2 && step % cfg.diagnostics_every == 0 {
        let row = monitor(params, cfg, &out, step, norms_sq)?;
        record.diagnostics.push(row);
    }
    opt.step(params, &out.grads, lr, &cfg.adam);
    record.rows.push(StepRow {
        step,
        epoch,
        loss: out.loss,
        residual_mean: out.residual_mean,
        grad_norm,
        lr,
        accuracy: out.correct.map(|c| c as f64 / chunk.len() as f64),
    });
    Ok(())
}

/// Monitors on the first sample of the batch, with `μ_t = μ*`.
fn monitor(params: &ModelParams, cfg: &TrainConfig, out: &BatchOutcome, step: usize, norms_sq: &[f64]) -> Result<DiagnosticRow> {
    let inputs = &out.inputs[0];
    let z_star = &out.samples[0].z_star;
    let mu_star = DiscreteMeasure::with_mask(z_star.clone(), inputs.z_mask.clone())?;
    let problem = InnerProblem::new(params, &inputs.x, &inputs.x_mask, &inputs.z_mask, &inputs.pins, cfg.flow.kernel)?;
    let seed = derive_seed(cfg.seed, &[TAG_MONITOR, step as u64]);
    let pl = match pl_ratio(&cfg.flow.kernel, &mu_star, cfg.pl_samples, seed) {
        Ok(v) => v,
        Err(Error::AllTermsSkipped) => f64::NAN,
        Err(e) => return Err(e),
    };
    Ok(DiagnosticRow {
        t: step,
        eps_t: eps_t(step),
        pl_ratio: pl,
        grad_discrepancy_ratio: grad_discrepancy_ratio(&problem, z_star, &mu_star, step)?,
        theorem_ratio: theorem_ratio(norms_sq, step)?,
    })
}

/// Evaluation metrics; fields not applicable to the task are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub samples: usize,
    pub mean_loss: f64,
    pub accuracy: Option<f64>,
    /// Mean `½MMD²` between prediction and ground truth.
    pub mmd_half: Option<f64>,
    /// Mean W2 between the free predicted particles and the removed ground truth.
    pub w2_free: Option<f64>,
    /// Mean W2 between the whole prediction and the whole ground truth.
    pub w2_full: Option<f64>,
}

/// Evaluates `params` on `data` with seeded latents.
pub fn evaluate(params: &ModelParams, data: &[PreparedSample], cfg: &TrainConfig) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let results: Vec<(f64, Tensor, SampleInputs)> = data
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let seed = derive_seed(cfg.seed, &[TAG_EVAL_LATENT, i as u64]);
            let (z0, pins) = latent_init(s, params, cfg, seed)?;
            let inputs = SampleInputs::new(s, z0, pins);
            let (loss, head, _) = predict(params, cfg, &inputs, &s.target)?;
            Ok((loss, head, inputs))
        })
        .collect::<Result<_>>()?;
    let n = data.len() as f64;
    let mut m = Metrics {
        samples: data.len(),
        mean_loss: results.iter().map(|r| r.0).sum::<f64>() / n,
        ..Metrics::default()
    };
    match cfg.task {
        TaskKind::Classify => {
            let correct = data
                .iter()
                .zip(&results)
                .filter(|(s, r)| matches!(s.target, Target::Class(c) if argmax(r.1.data()) == c))
                .count();
            m.accuracy = Some(correct as f64 / n);
        }
        TaskKind::Complete => {
            m.mmd_half = Some(m.mean_loss);
            let (mut full, mut free, mut n_free) = (0.0, 0.0, 0usize);
            for (s, (_, pred, inputs)) in data.iter().zip(&results) {
                let Target::Cloud(truth) = &s.target else { unreachable!() };
                let pm = DiscreteMeasure::with_mask(pred.clone(), inputs.z_mask.clone())?;
                full += w2_distance(&pm, truth)?;
                let free_mask: Vec<bool> = inputs.pins.iter().map(|&p| !p).collect();
                if let (Some(removed), true) = (&s.removed, free_mask.iter().any(|&f| f)) {
                    let fm = DiscreteMeasure::with_mask(pred.clone(), free_mask)?;
                    free += w2_distance(&fm, removed)?;
                    n_free += 1;
                }
            }
            m.w2_full = Some(full / n);
            m.w2_free = (n_free > 0).then(|| free / n_free as f64);
        }
    }
    Ok(m)
}
