//! Exact Wasserstein-2 evaluation and training-time monitors for the
//! convergence assumptions of the outer loop.

mod ot;

use std::fmt::Write as _;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

pub use ot::{min_cost_assignment, w2_distance, w2_distance_flow, MAX_SCALED_MASS};

use crate::error::{Error, Result};
use crate::kernel::{mmd_flow_gradient_fixed, mmd_sq, KernelSpec};
use crate::measure::{rng_from_seed, DiscreteMeasure};
use crate::solver::InnerProblem;
use crate::tensor::Tensor;

/// Gradient norms below this are treated as zero by [`pl_ratio`].
pub const PL_GUARD: f64 = 1e-12;

/// `ε_t = min(1, t^{-1/2})` for outer step `t ≥ 1`.
pub fn eps_t(t: usize) -> f64 {
    assert!(t >= 1, "outer steps are counted from 1");
    (1.0 / (t as f64).sqrt()).min(1.0)
}

/// Mean of `‖gᵢ‖²` over the active rows: the squared `L²(μ)` norm of a
/// particle vector field.
fn l2_norm_sq(g: &Tensor, mask: &[bool]) -> f64 {
    let n = mask.iter().filter(|&&m| m).count();
    let s: f64 = (0..g.rows())
        .filter(|&i| mask[i])
        .map(|i| g.row(i).iter().map(|v| v * v).sum::<f64>())
        .sum();
    s / n as f64
}

/// `F(μ) / ‖∇_W F(μ)‖²` with `F = ½MMD²(·, μ*)`, averaged over `draws`.
/// Draws whose gradient norm is below [`PL_GUARD`] are skipped.
pub fn pl_ratio_over(k: &KernelSpec, mu_star: &DiscreteMeasure, draws: &[DiscreteMeasure]) -> Result<f64> {
    let mut total = 0.0;
    let mut used = 0usize;
    for mu in draws {
        let f = 0.5 * mmd_sq(k, mu, mu_star)?;
        let g = mmd_flow_gradient_fixed(k, mu, mu_star)?;
        let norm = l2_norm_sq(&g, mu.mask());
        if norm < PL_GUARD {
            continue;
        }
        total += f / norm;
        used += 1;
    }
    if used == 0 {
        return Err(Error::AllTermsSkipped);
    }
    Ok(total / used as f64)
}

/// [`pl_ratio_over`] on `n_random` standard-normal clouds shaped like `μ*`.
///
/// `F` depends on the network only through `μ*`, so neither the parameters
/// nor the input enter here.
pub fn pl_ratio(k: &KernelSpec, mu_star: &DiscreteMeasure, n_random: usize, seed: u64) -> Result<f64> {
    let mut rng = rng_from_seed(seed);
    let n = mu_star.n_active();
    let d = mu_star.dim();
    let draws: Vec<DiscreteMeasure> = (0..n_random)
        .map(|_| {
            let t = Tensor::from_fn(&[n, d], |_| StandardNormal.sample(&mut rng));
            DiscreteMeasure::new(t)
        })
        .collect::<Result<_>>()?;
    pl_ratio_over(k, &mu_star.compact(), &draws)
}

/// `‖∇_W G(μ_t) − ∇_W F_{μ*}(μ_t)‖² / ε_t`.
///
/// The first gradient is the solver's `N · ∂G/∂Z`; the second is the
/// closed-form witness gradient against `μ*`.
pub fn grad_discrepancy_ratio(
    problem: &InnerProblem,
    mu_t: &Tensor,
    mu_star: &DiscreteMeasure,
    t: usize,
) -> Result<f64> {
    let (_, mut g1, _) = problem.objective_and_gradient(mu_t)?;
    let n = problem.n_active() as f64;
    g1.data_mut().iter_mut().for_each(|v| *v *= n);
    let mu = DiscreteMeasure::with_mask(mu_t.clone(), problem.z_mask.clone())?;
    let g2 = mmd_flow_gradient_fixed(&problem.kernel, &mu, mu_star)?;
    let diff = g1.zip_map(&g2, |a, b| a - b);
    Ok(l2_norm_sq(&diff, &problem.z_mask) / eps_t(t))
}

/// `Σ_{t≤T} ‖∇L(θ_t)‖² / (√T (log T)²)` over the first `T` entries.
pub fn theorem_ratio(grad_norms_sq: &[f64], t: usize) -> Result<f64> {
    if t < 2 || t > grad_norms_sq.len() {
        return Err(Error::Config(format!(
            "theorem ratio needs 2 ≤ T ≤ {}, got {t}",
            grad_norms_sq.len()
        )));
    }
    let s: f64 = grad_norms_sq[..t].iter().sum();
    let tf = t as f64;
    Ok(s / (tf.sqrt() * tf.ln().powi(2)))
}

/// One monitor row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiagnosticRow {
    pub t: usize,
    pub eps_t: f64,
    pub pl_ratio: f64,
    pub grad_discrepancy_ratio: f64,
    pub theorem_ratio: f64,
}

/// Monitor values over outer steps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiagnosticSeries {
    pub rows: Vec<DiagnosticRow>,
}

impl DiagnosticSeries {
    pub fn push(&mut self, row: DiagnosticRow) {
        self.rows.push(row);
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn all_finite(&self) -> bool {
        self.rows.iter().all(|r| {
            r.pl_ratio.is_finite() && r.grad_discrepancy_ratio.is_finite() && r.theorem_ratio.is_finite()
        })
    }

    /// Largest `(pl_ratio, grad_discrepancy_ratio, theorem_ratio)` seen.
    pub fn maxima(&self) -> (f64, f64, f64) {
        self.rows.iter().fold((f64::MIN, f64::MIN, f64::MIN), |m, r| {
            (
                m.0.max(r.pl_ratio),
                m.1.max(r.grad_discrepancy_ratio),
                m.2.max(r.theorem_ratio),
            )
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,eps_t,pl_ratio,grad_discrepancy_ratio,theorem_ratio\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.t, r.eps_t, r.pl_ratio, r.grad_discrepancy_ratio, r.theorem_ratio
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
