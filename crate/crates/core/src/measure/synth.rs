//! Seeded synthetic point-cloud datasets.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{normalize, rng_from_seed, DiscreteMeasure, Rng, Sample};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    /// Class `c` has `c + 1` Gaussian clusters on a circle.
    GaussianMixture,
    /// Class `c` is a closed curve `r(φ) = 1 + a cos((c + 1) φ)`; class 0 is a circle.
    Ring,
    /// Class `c` is a star with `c + 2` arms.
    Cross,
    /// Class `c` is a jittered `(c + 2) × (c + 2)` lattice.
    Grid,
}

impl FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-mixture" => Ok(ShapeFamily::GaussianMixture),
            "ring" => Ok(ShapeFamily::Ring),
            "cross" => Ok(ShapeFamily::Cross),
            "grid" => Ok(ShapeFamily::Grid),
            other => Err(Error::Config(format!("unknown shape family `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    /// Maximum particle count; each cloud has between 75% and 100% of it.
    pub particles: usize,
    pub dim: usize,
    pub shape_family: ShapeFamily,
    pub seed: u64,
}

fn template_point(family: ShapeFamily, class: usize, rng: &mut Rng) -> [f64; 2] {
    match family {
        ShapeFamily::GaussianMixture => {
            let k = class + 1;
            let j = rng.gen_range(0..k);
            let (cx, cy) = if k == 1 {
                (0.0, 0.0)
            } else {
                let a = 2.0 * PI * j as f64 / k as f64;
                (2.0 * a.cos(), 2.0 * a.sin())
            };
            let n = Normal::new(0.0, 0.35).unwrap();
            [cx + n.sample(rng), cy + n.sample(rng)]
        }
        ShapeFamily::Ring => {
            let phi = rng.gen_range(0.0..2.0 * PI);
            let amp = if class == 0 { 0.0 } else { 0.35 };
            let r = 1.0 + amp * ((class + 1) as f64 * phi).cos() + 0.03 * sn(rng);
            [r * phi.cos(), r * phi.sin()]
        }
        ShapeFamily::Cross => {
            let arms = class + 2;
            let a = 2.0 * PI * rng.gen_range(0..arms) as f64 / arms as f64;
            let t = rng.gen_range(0.0..1.0);
            [t * a.cos() + 0.03 * sn(rng), t * a.sin() + 0.03 * sn(rng)]
        }
        ShapeFamily::Grid => {
            let k = class + 2;
            let step = 2.0 / (k - 1) as f64;
            let (i, j) = (rng.gen_range(0..k), rng.gen_range(0..k));
            [
                -1.0 + step * i as f64 + 0.05 * sn(rng),
                -1.0 + step * j as f64 + 0.05 * sn(rng),
            ]
        }
    }
}

fn sn(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// One cloud of `class`, randomly rotated and anisotropically rescaled, then normalized.
fn draw_cloud(spec: &SynthSpec, class: usize, rng: &mut Rng) -> Result<DiscreteMeasure> {
    let lo = (spec.particles * 3).div_ceil(4).max(2);
    let n = rng.gen_range(lo..=spec.particles.max(lo));
    let theta = rng.gen_range(0.0..2.0 * PI);
    let (sx, sy) = (rng.gen_range(0.9..1.1), rng.gen_range(0.9..1.1));
    let (c, s) = (theta.cos(), theta.sin());
    let d = spec.dim;
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let [x, y] = template_point(spec.shape_family, class, rng);
        let (x, y) = (sx * x, sy * y);
        let p = [c * x - s * y, s * x + c * y];
        for k in 0..d {
            data.push(if k < 2 { p[k] } else { 0.05 * sn(rng) });
        }
    }
    normalize(&DiscreteMeasure::new(Tensor::from_vec(&[n, d], data)?)?)
}

/// Classes are interleaved: sample `k` has label `k % classes`.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Vec<Sample>> {
    if spec.classes == 0 || spec.dim < 2 || spec.particles < 2 {
        return Err(Error::Config(format!(
            "synthetic spec needs classes ≥ 1, dim ≥ 2, particles ≥ 2: {spec:?}"
        )));
    }
    let mut rng = rng_from_seed(spec.seed);
    let mut out = Vec::with_capacity(spec.classes * spec.samples_per_class);
    for s in 0..spec.samples_per_class {
        for c in 0..spec.classes {
            let cloud = draw_cloud(spec, c, &mut rng)?;
            out.push(Sample::classification(format!("c{c}-{s}"), cloud, c));
        }
    }
    Ok(out)
}
