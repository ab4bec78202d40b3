//! Kernels, squared MMD, and Wasserstein gradients of MMD functionals.
//!
//! With uniform weights `1/N` on the active particles of `μ` and `1/M` on those
//! of `ν`,
//!
//! ```text
//! MMD²(μ, ν) = Σᵢⱼ k(xᵢ,xⱼ)/N² + Σᵢⱼ k(yᵢ,yⱼ)/M² − 2 Σᵢⱼ k(xᵢ,yⱼ)/(NM)
//! ```
//!
//! The Riesz kernel `k(x,y) = −‖x−y‖` turns this into the energy distance.
//! Its gradient at `x = y` is taken to be zero.
//!
//! The Wasserstein gradient of `½MMD²(·, ν)` at particle `xᵢ` is the gradient
//! of the witness function `f_μ = ∫k(·,y)dμ − ∫k(·,y)dν`; it equals `N` times
//! the Euclidean gradient of `½MMD²` with respect to `xᵢ`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::measure::DiscreteMeasure;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum KernelSpec {
    Riesz,
    Gaussian { sigma: f64 },
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::Riesz
    }
}

impl KernelSpec {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::Config(format!(
                "gaussian bandwidth must be positive, got {sigma}"
            )));
        }
        Ok(KernelSpec::Gaussian { sigma })
    }

    fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        match *self {
            KernelSpec::Riesz => -d2.sqrt(),
            KernelSpec::Gaussian { sigma } => (-d2 / (2.0 * sigma * sigma)).exp(),
        }
    }

    /// Adds `scale · ∇₁k(x, y)` into `out`.
    fn add_grad1(&self, x: &[f64], y: &[f64], scale: f64, out: &mut [f64]) {
        match *self {
            KernelSpec::Riesz => {
                let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2 == 0.0 {
                    return;
                }
                let inv = scale / d2.sqrt();
                for ((o, a), b) in out.iter_mut().zip(x).zip(y) {
                    *o -= (a - b) * inv;
                }
            }
            KernelSpec::Gaussian { sigma } => {
                let s2 = sigma * sigma;
                let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                let c = scale * (-d2 / (2.0 * s2)).exp() / s2;
                for ((o, a), b) in out.iter_mut().zip(x).zip(y) {
                    *o -= (a - b) * c;
                }
            }
        }
    }
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            expected: a,
            got: b,
        });
    }
    Ok(())
}

pub fn kernel_eval(k: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    check_dims(x.len(), y.len())?;
    Ok(k.eval_unchecked(x, y))
}

/// `∇ₓ k(x, y)`; zero at coincidence for the Riesz kernel.
pub fn kernel_grad1(k: &KernelSpec, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    check_dims(x.len(), y.len())?;
    let mut g = vec![0.0; x.len()];
    k.add_grad1(x, y, 1.0, &mut g);
    Ok(g)
}

/// Correctly rounded floating-point sum (Shewchuk's algorithm), independent
/// of summation order.
pub(crate) fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    // round the expansion to nearest
    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        n -= 1;
        let x = hi;
        let y = partials[n];
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        let yr = x - hi;
        if y == yr {
            hi = x;
        }
    }
    hi
}

fn mean_kernel(k: &KernelSpec, a: &DiscreteMeasure, b: &DiscreteMeasure) -> f64 {
    let s = exact_sum(
        a.active_rows()
            .flat_map(|x| b.active_rows().map(move |y| k.eval_unchecked(x, y))),
    );
    s / (a.n_active() as f64 * b.n_active() as f64)
}

/// Squared MMD between the active particles of `mu` and `nu`.
///
/// Exactly symmetric and exactly invariant under reordering of either input.
pub fn mmd_sq(k: &KernelSpec, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<f64> {
    check_dims(mu.dim(), nu.dim())?;
    if mu.n_active() == 0 || nu.n_active() == 0 {
        return Err(Error::AllMasked);
    }
    let xx = mean_kernel(k, mu, mu);
    let yy = mean_kernel(k, nu, nu);
    let xy = mean_kernel(k, mu, nu);
    Ok((xx + yy) - 2.0 * xy)
}

/// Witness-function gradient `∇f(p)` at each row `p` of `at`, where
/// `f = ∫k(·,y)dμ − ∫k(·,y)dν`. Rows with `at_mask == false` stay zero.
fn witness_gradient(
    k: &KernelSpec,
    at: &Tensor,
    at_mask: &[bool],
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
) -> Tensor {
    let d = at.cols();
    let (wm, wn) = (mu.weight(), nu.weight());
    let mut out = Tensor::zeros(&[at.rows(), d]);
    for i in 0..at.rows() {
        if !at_mask[i] {
            continue;
        }
        let p = at.row(i);
        let (mut gm, mut gn) = (vec![0.0; d], vec![0.0; d]);
        for x in mu.active_rows() {
            k.add_grad1(p, x, wm, &mut gm);
        }
        for y in nu.active_rows() {
            k.add_grad1(p, y, wn, &mut gn);
        }
        for ((o, a), b) in out.row_mut(i).iter_mut().zip(&gm).zip(&gn) {
            *o = a - b;
        }
    }
    out
}

/// Wasserstein gradient of `μ ↦ ½MMD²(μ, ν)` for fixed `ν`, one row per particle.
pub fn mmd_flow_gradient_fixed(
    k: &KernelSpec,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
) -> Result<Tensor> {
    check_dims(mu.dim(), nu.dim())?;
    if mu.n_active() == 0 || nu.n_active() == 0 {
        return Err(Error::AllMasked);
    }
    Ok(witness_gradient(k, mu.points(), mu.mask(), mu, nu))
}

/// A per-particle map `T: Rᵈ → Rᵈ` with a vector–Jacobian product.
pub trait PushforwardMap {
    /// `T` applied to every row.
    fn apply(&self, points: &Tensor) -> Result<Tensor>;
    /// Row `i` of the result is `∇T(xᵢ)ᵀ vᵢ`.
    fn vjp(&self, points: &Tensor, v: &Tensor) -> Result<Tensor>;
}

/// Wasserstein gradient of `μ ↦ ½MMD²(μ, T#μ)`: `∇f_μ − ∇T·(∇f_μ ∘ T)` with
/// the witness `f_μ` taken between `μ` and `T#μ`.
pub fn wasserstein_gradient_pushforward(
    k: &KernelSpec,
    mu: &DiscreteMeasure,
    map: &dyn PushforwardMap,
) -> Result<Tensor> {
    if mu.n_active() == 0 {
        return Err(Error::AllMasked);
    }
    let mapped = map.apply(mu.points())?;
    if mapped.shape() != mu.points().shape() {
        return Err(Error::shape(format!(
            "pushforward changed shape {:?} → {:?}",
            mu.points().shape(),
            mapped.shape()
        )));
    }
    let pushed = DiscreteMeasure::with_mask(mapped.clone(), mu.mask().to_vec())?;
    let direct = witness_gradient(k, mu.points(), mu.mask(), mu, &pushed);
    let at_image = witness_gradient(k, &mapped, mu.mask(), mu, &pushed);
    let pulled = map.vjp(mu.points(), &at_image)?;
    let mut out = direct;
    for i in 0..out.rows() {
        if mu.mask()[i] {
            for (o, p) in out.row_mut(i).iter_mut().zip(pulled.row(i)) {
                *o -= p;
            }
        }
    }
    Ok(out)
}

/// Target of an MMD gradient flow.
pub enum FlowTarget<'a> {
    Fixed(&'a DiscreteMeasure),
    Pushforward(&'a dyn PushforwardMap),
}

/// `½MMD²(μ, target)` together with its Wasserstein gradient.
pub struct MmdObjective<'a> {
    pub kernel: KernelSpec,
    pub target: FlowTarget<'a>,
}

impl MmdObjective<'_> {
    pub fn value(&self, mu: &DiscreteMeasure) -> Result<f64> {
        Ok(0.5 * self.mmd_sq(mu)?)
    }

    /// `MMD²(μ, target)`.
    pub fn mmd_sq(&self, mu: &DiscreteMeasure) -> Result<f64> {
        match &self.target {
            FlowTarget::Fixed(nu) => mmd_sq(&self.kernel, mu, nu),
            FlowTarget::Pushforward(map) => {
                let pushed = DiscreteMeasure::with_mask(map.apply(mu.points())?, mu.mask().to_vec())?;
                mmd_sq(&self.kernel, mu, &pushed)
            }
        }
    }

    pub fn wasserstein_gradient(&self, mu: &DiscreteMeasure) -> Result<Tensor> {
        match &self.target {
            FlowTarget::Fixed(nu) => mmd_flow_gradient_fixed(&self.kernel, mu, nu),
            FlowTarget::Pushforward(map) => wasserstein_gradient_pushforward(&self.kernel, mu, *map),
        }
    }
}

/// Linear map `x ↦ A x` applied per particle.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMap {
    /// `d × d`, row-major.
    pub matrix: Tensor,
}

impl LinearMap {
    /// Planar rotation by `angle` radians about the origin.
    pub fn rotation(angle: f64) -> Self {
        let (c, s) = (angle.cos(), angle.sin());
        LinearMap {
            matrix: Tensor::from_vec(&[2, 2], vec![c, -s, s, c]).expect("2×2"),
        }
    }

    pub fn identity(d: usize) -> Self {
        LinearMap {
            matrix: Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 }),
        }
    }
}

impl PushforwardMap for LinearMap {
    fn apply(&self, points: &Tensor) -> Result<Tensor> {
        Tensor::matmul(points, &self.matrix, false, true)
    }

    fn vjp(&self, _points: &Tensor, v: &Tensor) -> Result<Tensor> {
        Tensor::matmul(v, &self.matrix, false, false)
    }
}

/// Per-row weights `1/N_active` (zero on inactive rows).
fn row_weights(mask: &[bool]) -> Result<Vec<f64>> {
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::AllMasked);
    }
    Ok(mask
        .iter()
        .map(|&m| if m { 1.0 / n as f64 } else { 0.0 })
        .collect())
}

fn kernel_matrix_on_tape(tape: &mut Tape, k: &KernelSpec, x: Var, y: Var) -> Result<Var> {
    match *k {
        KernelSpec::Riesz => {
            let d = tape.pairwise_distance(x, y)?;
            Ok(tape.neg(d))
        }
        KernelSpec::Gaussian { sigma } => {
            let diff = tape.pair_diff(x, y)?;
            let sq = tape.mul(diff, diff)?;
            let d2 = tape.sum_axis(sq, 2)?;
            let s = tape.scale(d2, -1.0 / (2.0 * sigma * sigma));
            Ok(tape.exp(s))
        }
    }
}

fn weighted_kernel_sum(
    tape: &mut Tape,
    k: &KernelSpec,
    x: Var,
    wx: &[f64],
    y: Var,
    wy: &[f64],
) -> Result<Var> {
    let km = kernel_matrix_on_tape(tape, k, x, y)?;
    let w = Tensor::from_fn(&[wx.len(), wy.len()], |e| wx[e / wy.len()] * wy[e % wy.len()]);
    let weighted = tape.mul_const(km, w)?;
    Ok(tape.sum(weighted))
}

/// Differentiable `MMD²` between the masked row sets of `x` and `y`.
pub fn mmd_sq_on_tape(
    tape: &mut Tape,
    k: &KernelSpec,
    x: Var,
    x_mask: &[bool],
    y: Var,
    y_mask: &[bool],
) -> Result<Var> {
    check_dims(tape.value(x).cols(), tape.value(y).cols())?;
    let wx = row_weights(x_mask)?;
    let wy = row_weights(y_mask)?;
    let xx = weighted_kernel_sum(tape, k, x, &wx, x, &wx)?;
    let yy = weighted_kernel_sum(tape, k, y, &wy, y, &wy)?;
    let xy = weighted_kernel_sum(tape, k, x, &wx, y, &wy)?;
    let s = tape.add(xx, yy)?;
    let c = tape.scale(xy, 2.0);
    tape.sub(s, c)
}
