//! Flat run configuration.
//!
//! One TOML table of typed keys; unknown keys are rejected. Units: step sizes
//! and learning rates are per update, fractions are in `[0, 1]`, counts are
//! particles or steps.
//!
//! ```toml
//! task = "classify"
//! epochs = 10
//! inner_iterations = 50
//! synth_family = "gaussian-mixture"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::measure::{load_points_csv, normalize, synth_dataset, DatasetManifest, Sample, ShapeFamily, SynthSpec, TaskKind};
use crate::net::ModelConfig;
use crate::solver::FlowConfig;
use crate::train::{AdamConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskKind,
    pub seed: u64,

    /// Dataset manifest (TOML); when absent a synthetic dataset is generated.
    pub dataset: Option<PathBuf>,
    pub train_split: String,
    pub test_split: String,
    pub synth_family: ShapeFamily,
    pub synth_classes: usize,
    pub synth_train: usize,
    pub synth_test: usize,
    pub synth_particles: usize,
    pub synth_dim: usize,
    pub synth_seed: u64,

    /// Class count; `0` infers it from the training labels.
    pub num_classes: usize,
    pub latent_dim: usize,
    pub bilinear_dim: usize,
    pub per_head_dim: usize,
    pub cross_encoder_layers: usize,
    pub self_encoder_layers: usize,
    pub pushforward_only: bool,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lr_drops: Vec<f64>,
    pub lr_factor: f64,
    pub latent_particles: usize,
    pub free_fraction: f64,
    pub noise_fraction: f64,
    pub partial_radius: f64,
    pub phantom_damping: f64,
    /// Global-norm gradient clip; `0` disables it.
    pub grad_clip: f64,

    pub inner_iterations: usize,
    pub inner_step_size: f64,
    pub inner_step_decay: f64,
    pub rescale_by_n: bool,
    /// `riesz` or `gaussian`.
    pub kernel: String,
    pub kernel_sigma: f64,

    pub diagnostics_every: usize,
    pub pl_samples: usize,
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::desk(2);
        let t = TrainConfig::default();
        RunConfig {
            task: TaskKind::Classify,
            seed: 0,
            dataset: None,
            train_split: "train".into(),
            test_split: "test".into(),
            synth_family: ShapeFamily::GaussianMixture,
            synth_classes: 3,
            synth_train: 300,
            synth_test: 150,
            synth_particles: 64,
            synth_dim: 2,
            synth_seed: 0,
            num_classes: 0,
            latent_dim: m.latent_dim,
            bilinear_dim: m.bilinear_dim,
            per_head_dim: m.per_head_dim,
            cross_encoder_layers: m.cross_encoder_layers,
            self_encoder_layers: m.self_encoder_layers,
            pushforward_only: false,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.adam.lr,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            lr_drops: t.lr_drops,
            lr_factor: t.lr_factor,
            latent_particles: t.latent_particles,
            free_fraction: t.free_fraction,
            noise_fraction: t.noise_fraction,
            partial_radius: t.partial_radius,
            phantom_damping: t.phantom_damping,
            grad_clip: 0.0,
            inner_iterations: 50,
            inner_step_size: t.flow.step_size,
            inner_step_decay: t.flow.step_decay,
            rescale_by_n: true,
            kernel: "riesz".into(),
            kernel_sigma: 1.0,
            diagnostics_every: 0,
            pl_samples: t.pl_samples,
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    /// Reads a config file. Missing files and unreadable contents are both
    /// reported as [`Error::Config`] naming the path.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(d) = &cfg.dataset {
            if d.is_relative() {
                cfg.dataset = Some(path.parent().unwrap_or(Path::new(".")).join(d));
            }
        }
        cfg.train_config()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn kernel_spec(&self) -> Result<KernelSpec> {
        match self.kernel.as_str() {
            "riesz" => Ok(KernelSpec::Riesz),
            "gaussian" => KernelSpec::gaussian(self.kernel_sigma),
            other => Err(Error::Config(format!("unknown kernel `{other}`"))),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            task: self.task,
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
            },
            lr_drops: self.lr_drops.clone(),
            lr_factor: self.lr_factor,
            latent_particles: self.latent_particles,
            free_fraction: self.free_fraction,
            noise_fraction: self.noise_fraction,
            partial_radius: self.partial_radius,
            phantom_damping: self.phantom_damping,
            grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
            flow: FlowConfig {
                iterations: self.inner_iterations,
                step_size: self.inner_step_size,
                step_decay: self.inner_step_decay,
                rescale_by_n: self.rescale_by_n,
                kernel: self.kernel_spec()?,
                record_every: 0,
                ..FlowConfig::default()
            },
            seed: self.seed,
            diagnostics_every: self.diagnostics_every,
            pl_samples: self.pl_samples,
            checkpoint_every: self.checkpoint_every,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self, data_dim: usize, num_classes: usize) -> Result<ModelConfig> {
        let m = ModelConfig {
            data_dim,
            latent_dim: self.latent_dim,
            bilinear_dim: self.bilinear_dim,
            per_head_dim: self.per_head_dim,
            cross_encoder_layers: self.cross_encoder_layers,
            self_encoder_layers: self.self_encoder_layers,
            pushforward_only: self.pushforward_only,
            num_classes: if self.task == TaskKind::Classify { num_classes } else { 0 },
            coupling: self.task == TaskKind::Complete,
        };
        m.validate()?;
        Ok(m)
    }

    /// Train and test splits.
    pub fn load_data(&self) -> Result<(Vec<Sample>, Vec<Sample>)> {
        match &self.dataset {
            Some(path) => {
                let man = DatasetManifest::load(path)?;
                if man.task != self.task {
                    return Err(Error::Config(format!(
                        "{}: dataset task {:?} does not match run task {:?}",
                        path.display(),
                        man.task,
                        self.task
                    )));
                }
                let read = |split: &str| -> Result<Vec<Sample>> {
                    let mut s = load_points_csv(man.split(split)?)?;
                    if man.preprocess.normalize {
                        for x in &mut s {
                            x.input = normalize(&x.input)?;
                        }
                    }
                    Ok(s)
                };
                Ok((read(&self.train_split)?, read(&self.test_split)?))
            }
            None => {
                let total = self.synth_train + self.synth_test;
                let all = synth_dataset(&SynthSpec {
                    classes: self.synth_classes,
                    samples_per_class: total.div_ceil(self.synth_classes.max(1)),
                    particles: self.synth_particles,
                    dim: self.synth_dim,
                    shape_family: self.synth_family,
                    seed: self.synth_seed,
                })?;
                let mut all: Vec<Sample> = all.into_iter().take(total).collect();
                let test = all.split_off(self.synth_train.min(all.len()));
                Ok((all, test))
            }
        }
    }

    /// Class count from the config or the largest training label.
    pub fn resolve_classes(&self, train: &[Sample]) -> usize {
        if self.num_classes > 0 {
            return self.num_classes;
        }
        train.iter().filter_map(|s| s.label).max().map_or(0, |m| m + 1)
    }
}
