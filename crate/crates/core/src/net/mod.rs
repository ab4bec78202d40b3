//! The equilibrium network `F_θ(Z, X)`, the coupling layer `q`, and the class head.
//!
//! Every map here has the EI property: permuting the rows of `Z` permutes the
//! output rows the same way, and permuting the rows of `X` changes nothing.

pub mod core;
mod coupling;
mod layers;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::measure::rng_from_seed;
use crate::tensor::Tensor;

pub use self::core::{core_forward, ddeq_core_forward, encode_source, latent_forward, Source};
pub use coupling::{coupling_forward, coupling_inverse, coupling_on_tape, coupling_inverse_on_tape};
pub use layers::{bilinear_forward, classify_head, encoder_block, multihead_attention};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub data_dim: usize,
    pub latent_dim: usize,
    pub bilinear_dim: usize,
    pub per_head_dim: usize,
    pub cross_encoder_layers: usize,
    pub self_encoder_layers: usize,
    /// Drops the `β` bilinear term and the latent self-encoder, making the
    /// network a per-particle map of `Z` for fixed `X`.
    #[serde(default)]
    pub pushforward_only: bool,
    /// Number of classes; `0` means no classification head.
    #[serde(default)]
    pub num_classes: usize,
    /// Whether the coupling layer `q` is part of the model (completion).
    #[serde(default)]
    pub coupling: bool,
}

impl ModelConfig {
    /// Layer sizes used for the full-size experiments.
    pub fn full(data_dim: usize) -> Self {
        ModelConfig {
            data_dim,
            latent_dim: 128,
            bilinear_dim: 16,
            per_head_dim: 4,
            cross_encoder_layers: 3,
            self_encoder_layers: 1,
            pushforward_only: false,
            num_classes: 0,
            coupling: false,
        }
    }

    /// Small configuration that trains in minutes on one core.
    pub fn desk(data_dim: usize) -> Self {
        ModelConfig {
            latent_dim: 32,
            bilinear_dim: 8,
            cross_encoder_layers: 1,
            ..Self::full(data_dim)
        }
    }

    pub fn with_classes(mut self, n: usize) -> Self {
        self.num_classes = n;
        self
    }

    pub fn with_coupling(mut self) -> Self {
        self.coupling = true;
        self
    }

    pub fn ffn_hidden(&self) -> usize {
        4 * self.latent_dim
    }

    pub fn heads(&self) -> usize {
        self.latent_dim / self.per_head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("data_dim", self.data_dim),
            ("latent_dim", self.latent_dim),
            ("bilinear_dim", self.bilinear_dim),
            ("per_head_dim", self.per_head_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.latent_dim % self.per_head_dim != 0 {
            return Err(Error::Config(format!(
                "latent_dim {} is not divisible by per_head_dim {}",
                self.latent_dim, self.per_head_dim
            )));
        }
        if self.coupling && self.latent_dim % 2 != 0 {
            return Err(Error::OddLatentDim(self.latent_dim));
        }
        if self.coupling && self.data_dim > self.latent_dim {
            return Err(Error::Config(format!(
                "data_dim {} exceeds latent_dim {}",
                self.data_dim, self.latent_dim
            )));
        }
        Ok(())
    }

    /// Names and shapes of every parameter, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, p, b) = (self.data_dim, self.latent_dim, self.bilinear_dim);
        let mut out = Vec::new();
        let ffn = |out: &mut Vec<(String, Vec<usize>)>, pre: &str, i: usize, h: usize, o: usize| {
            out.push((format!("{pre}.w1"), vec![i, h]));
            out.push((format!("{pre}.b1"), vec![h]));
            out.push((format!("{pre}.w2"), vec![h, o]));
            out.push((format!("{pre}.b2"), vec![o]));
        };
        let ln = |out: &mut Vec<(String, Vec<usize>)>, pre: &str, k: usize| {
            out.push((format!("{pre}.gain"), vec![k]));
            out.push((format!("{pre}.bias"), vec![k]));
        };
        let encoder = |out: &mut Vec<(String, Vec<usize>)>, pre: &str| {
            for m in ["q", "k", "v", "o"] {
                out.push((format!("{pre}.attn.w{m}"), vec![p, p]));
                out.push((format!("{pre}.attn.b{m}"), vec![p]));
            }
            ln(out, &format!("{pre}.ln1"), p);
            ffn(out, &format!("{pre}.ffn"), p, p, p);
            ln(out, &format!("{pre}.ln2"), p);
        };
        ffn(&mut out, "z_in.ffn", p, b, b);
        ln(&mut out, "z_in.ln", b);
        ffn(&mut out, "x_in.ffn", d, b, b);
        ln(&mut out, "x_in.ln", b);
        out.push(("bil.alpha".into(), vec![b, b, b]));
        if !self.pushforward_only {
            out.push(("bil.beta".into(), vec![b, b, b]));
        }
        ln(&mut out, "bil.ln", b);
        ffn(&mut out, "z_up.ffn", b, p, p);
        ln(&mut out, "z_up.ln", p);
        ffn(&mut out, "x_up.ffn", b, p, p);
        ln(&mut out, "x_up.ln", p);
        for l in 0..self.self_encoder_layers {
            encoder(&mut out, &format!("x_self.{l}"));
        }
        if !self.pushforward_only {
            for l in 0..self.self_encoder_layers {
                encoder(&mut out, &format!("z_self.{l}"));
            }
        }
        for l in 0..self.cross_encoder_layers {
            encoder(&mut out, &format!("cross.{l}"));
        }
        ffn(&mut out, "out.ffn", p, self.ffn_hidden(), p);
        ln(&mut out, "out.ln", p);
        if self.num_classes > 0 {
            out.push(("head.w".into(), vec![p, self.num_classes]));
            out.push(("head.b".into(), vec![self.num_classes]));
        }
        if self.coupling {
            for net in ["phi", "psi"] {
                ffn(&mut out, &format!("coupling.{net}"), p / 2, p / 2, p / 2);
            }
        }
        out
    }
}

/// Every weight of the model, keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    tensors: BTreeMap<String, Arc<Tensor>>,
}

/// Whether a parameter belongs to the equilibrium network itself.
pub fn is_core_param(name: &str) -> bool {
    !(name.starts_with("head.") || name.starts_with("coupling."))
}

impl ModelParams {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .map(|t| t.as_ref())
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(format!(
                "{name}: expected {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = Arc::new(value);
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Applies `f` to every tensor in place.
    pub fn update(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        for (k, v) in self.tensors.iter_mut() {
            f(k, Arc::make_mut(v));
        }
    }

    /// Registers every tensor on `tape`, as leaves when `trainable`, else as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self
                .tensors
                .iter()
                .map(|(k, v)| Entry {
                    name: k.clone(),
                    shape: v.shape().to_vec(),
                    values: v.data().to_vec(),
                })
                .collect(),
        };
        let text = serde_json::to_string(&file).map_err(|e| Error::Schema(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                file.format,
                file.version
            )));
        }
        file.config.validate()?;
        let mut tensors = BTreeMap::new();
        for e in file.params {
            tensors.insert(e.name, Arc::new(Tensor::from_vec(&e.shape, e.values)?));
        }
        for (name, shape) in file.config.param_shapes() {
            match tensors.get(&name) {
                None => return Err(Error::MissingParam(name)),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Schema(format!(
                        "{name}: expected shape {shape:?}, found {:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if tensors.len() != file.config.param_shapes().len() {
            return Err(Error::Schema("checkpoint has unexpected parameters".into()));
        }
        Ok(ModelParams {
            config: file.config,
            tensors,
        })
    }
}

const CHECKPOINT_FORMAT: &str = "ddeq-params";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    params: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Parameters registered on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Deterministic initialization.
///
/// Linear weights and biases are uniform in `±1/√fan_in`, layer norms start at
/// gain 1 and bias 0, and the bilinear tensors are normal with standard
/// deviation `1/bilinear_dim`. The coupling nets' output layers start at zero,
/// so `q` is the identity at initialization.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = rng_from_seed(seed);
    let mut tensors = BTreeMap::new();
    for (name, shape) in config.param_shapes() {
        let leaf = name.rsplit('.').next().unwrap_or("");
        let n: usize = shape.iter().product();
        let t = if leaf == "gain" {
            Tensor::full(&shape, 1.0)
        } else if leaf == "bias" {
            Tensor::zeros(&shape)
        } else if name.starts_with("coupling.") && (leaf == "w2" || leaf == "b2") {
            Tensor::zeros(&shape)
        } else if name.starts_with("bil.") {
            let s = 1.0 / config.bilinear_dim as f64;
            Tensor::from_vec(
                &shape,
                (0..n)
                    .map(|_| s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                    .collect(),
            )?
        } else {
            let fan_in = fan_in(&name, &shape, config);
            let bound = 1.0 / (fan_in as f64).sqrt();
            Tensor::from_vec(&shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())?
        };
        tensors.insert(name, Arc::new(t));
    }
    Ok(ModelParams {
        config: config.clone(),
        tensors,
    })
}

fn fan_in(name: &str, shape: &[usize], config: &ModelConfig) -> usize {
    if shape.len() == 2 {
        return shape[0];
    }
    // a bias: its layer's input width
    let leaf = name.rsplit('.').next().unwrap_or("");
    let sibling = format!("{}w{}", &name[..name.len() - leaf.len()], &leaf[1..]);
    config
        .param_shapes()
        .into_iter()
        .find(|(n, _)| *n == sibling)
        .map_or(shape[0], |(_, s)| s[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_params() {
        let c = ModelConfig::desk(2).with_classes(3);
        assert_eq!(init_params(&c, 5).unwrap(), init_params(&c, 5).unwrap());
        assert_ne!(init_params(&c, 5).unwrap(), init_params(&c, 6).unwrap());
    }

    #[test]
    fn layer_norm_gains_start_at_one() {
        let p = init_params(&ModelConfig::desk(3).with_coupling(), 0).unwrap();
        let mut seen = 0;
        for (name, t) in p.iter() {
            if name.ends_with(".gain") {
                seen += 1;
                assert!(t.data().iter().all(|&v| v == 1.0));
            }
        }
        assert!(seen > 5);
    }

    #[test]
    fn pushforward_variant_has_no_interaction_weights() {
        let mut c = ModelConfig::desk(2);
        c.pushforward_only = true;
        let p = init_params(&c, 0).unwrap();
        assert!(p.get("bil.beta").is_err());
        assert!(p.names().all(|n| !n.starts_with("z_self.")));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let p = init_params(&ModelConfig::desk(2).with_classes(4).with_coupling(), 9).unwrap();
        p.save(&path).unwrap();
        assert_eq!(ModelParams::load(&path).unwrap(), p);
    }

    #[test]
    fn invalid_configs() {
        let mut c = ModelConfig::desk(2);
        c.per_head_dim = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::desk(2).with_coupling();
        c.latent_dim = 9;
        c.per_head_dim = 3;
        assert!(matches!(c.validate(), Err(Error::OddLatentDim(9))));
    }

    #[test]
    fn bias_fan_in_follows_its_weight() {
        let c = ModelConfig::desk(2);
        assert_eq!(fan_in("x_in.ffn.b1", &[8], &c), 2);
        assert_eq!(fan_in("out.ffn.b2", &[32], &c), 128);
        assert_eq!(fan_in("cross.0.attn.bq", &[32], &c), 32);
    }
}
