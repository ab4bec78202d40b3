//! Finite-difference checks for every tape operation.

use std::sync::Arc;

use rand::Rng as _;

use crate::autodiff::{gradcheck, GradcheckReport, Tape, Var};
use crate::error::Result;
use crate::measure::rng_from_seed;
use crate::tensor::Tensor;

/// One named check.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: String,
    pub report: GradcheckReport,
}

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = rng_from_seed(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero with random signs.
fn off_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_from_seed(seed);
    Tensor::from_fn(shape, |_| {
        let v = rng.gen_range(0.2..1.5);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Contracts any output with fixed random weights so every entry matters.
fn reduce(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = uniform(&shape, -1.0, 1.0, 99 + shape.iter().sum::<usize>() as u64);
    let p = tape.mul_const(y, w)?;
    Ok(tape.sum(p))
}

type Case = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);

fn cases() -> Vec<Case> {
    let a = || uniform(&[3, 4], -1.0, 1.0, 1);
    let b = || uniform(&[3, 4], -1.0, 1.0, 2);
    let pos = || uniform(&[3, 4], 0.3, 2.0, 3);
    let mask3 = [true, false, true];
    vec![
        ("add", vec![a(), b()], Box::new(|t, v| { let y = t.add(v[0], v[1])?; reduce(t, y) })),
        ("sub", vec![a(), b()], Box::new(|t, v| { let y = t.sub(v[0], v[1])?; reduce(t, y) })),
        ("mul", vec![a(), b()], Box::new(|t, v| { let y = t.mul(v[0], v[1])?; reduce(t, y) })),
        ("neg", vec![a()], Box::new(|t, v| { let y = t.neg(v[0]); reduce(t, y) })),
        ("scale", vec![a()], Box::new(|t, v| { let y = t.scale(v[0], -1.7); reduce(t, y) })),
        ("add_scalar", vec![a()], Box::new(|t, v| { let y = t.add_scalar(v[0], 0.4); let y = t.mul(y, y)?; reduce(t, y) })),
        ("mul_const", vec![a()], Box::new(|t, v| { let y = t.mul_const(v[0], uniform(&[3, 4], -2.0, 2.0, 4))?; reduce(t, y) })),
        ("matmul", vec![a(), uniform(&[4, 2], -1.0, 1.0, 5)], Box::new(|t, v| { let y = t.matmul(v[0], v[1])?; reduce(t, y) })),
        ("matmul_t", vec![a(), b()], Box::new(|t, v| {
            let y = t.matmul_t(v[0], v[1], false, true)?;
            let z = t.matmul_t(v[0], v[1], true, false)?;
            let (y, z) = (reduce(t, y)?, reduce(t, z)?);
            t.add(y, z)
        })),
        ("relu", vec![off_zero(&[3, 4], 6)], Box::new(|t, v| { let y = t.relu(v[0]); reduce(t, y) })),
        ("exp", vec![a()], Box::new(|t, v| { let y = t.exp(v[0]); reduce(t, y) })),
        ("log", vec![pos()], Box::new(|t, v| { let y = t.log(v[0]); reduce(t, y) })),
        ("powf", vec![pos()], Box::new(|t, v| { let y = t.powf(v[0], 1.5); reduce(t, y) })),
        ("safe_sqrt", vec![pos()], Box::new(|t, v| { let y = t.safe_sqrt(v[0]); reduce(t, y) })),
        ("safe_recip", vec![pos()], Box::new(|t, v| { let y = t.safe_recip(v[0]); reduce(t, y) })),
        ("sum", vec![a()], Box::new(|t, v| { let y = t.mul(v[0], v[0])?; Ok(t.sum(y)) })),
        ("expand", vec![uniform(&[1], -1.0, 1.0, 7)], Box::new(|t, v| { let y = t.expand(v[0], &[3, 4])?; let y = t.mul(y, y)?; reduce(t, y) })),
        ("sum_axis", vec![a()], Box::new(|t, v| {
            let y0 = t.sum_axis(v[0], 0)?;
            let y1 = t.sum_axis(v[0], 1)?;
            let (y0, y1) = (reduce(t, y0)?, reduce(t, y1)?);
            t.add(y0, y1)
        })),
        ("broadcast_axis", vec![uniform(&[4], -1.0, 1.0, 8)], Box::new(|t, v| { let y = t.broadcast_axis(v[0], 0, 3)?; reduce(t, y) })),
        ("reshape", vec![a()], Box::new(|t, v| { let y = t.reshape(v[0], &[2, 6])?; reduce(t, y) })),
        ("slice_cols", vec![a()], Box::new(|t, v| { let y = t.slice_cols(v[0], 1, 2)?; reduce(t, y) })),
        ("pad_cols", vec![a()], Box::new(|t, v| { let y = t.pad_cols(v[0], 2, 7)?; let y = t.exp(y); reduce(t, y) })),
        ("concat_cols", vec![a(), uniform(&[3, 2], -1.0, 1.0, 9)], Box::new(|t, v| { let y = t.concat_cols(&[v[0], v[1]])?; reduce(t, y) })),
        ("pair_diff", vec![a(), uniform(&[2, 4], -1.0, 1.0, 10)], Box::new(|t, v| { let y = t.pair_diff(v[0], v[1])?; let y = t.mul(y, y)?; reduce(t, y) })),
        ("gather_rows", vec![a()], Box::new(|t, v| { let y = t.gather_rows(v[0], Arc::new(vec![2, 0, 1, 2]))?; reduce(t, y) })),
        ("scatter_rows", vec![uniform(&[4], -1.0, 1.0, 11)], Box::new(|t, v| { let y = t.scatter_rows(v[0], Arc::new(vec![2, 0, 1, 2]), 3)?; reduce(t, y) })),
        ("masked_max_rows", vec![uniform(&[3, 4], -1.0, 1.0, 12)], Box::new(move |t, v| { let y = t.masked_max_rows(v[0], &mask3)?; reduce(t, y) })),
        ("masked_softmax", vec![a()], Box::new(|t, v| {
            let m = Tensor::from_fn(&[3, 4], |e| if e % 3 == 1 { 0.0 } else { 1.0 });
            let y = t.masked_softmax(v[0], &m)?;
            reduce(t, y)
        })),
        ("affine", vec![a(), uniform(&[4, 3], -1.0, 1.0, 13), uniform(&[3], -1.0, 1.0, 14)], Box::new(|t, v| { let y = t.affine(v[0], v[1], v[2])?; reduce(t, y) })),
        ("layer_norm", vec![a(), uniform(&[4], 0.5, 1.5, 15), uniform(&[4], -0.5, 0.5, 16)], Box::new(|t, v| { let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?; reduce(t, y) })),
        ("mask_rows", vec![a()], Box::new(move |t, v| { let y = t.mask_rows(v[0], &mask3)?; let y = t.exp(y); reduce(t, y) })),
        ("overwrite_rows", vec![a(), b()], Box::new(move |t, v| { let y = t.overwrite_rows(v[0], v[1], &mask3)?; reduce(t, y) })),
        ("masked_mean_rows", vec![a()], Box::new(move |t, v| { let y = t.masked_mean_rows(v[0], &mask3)?; reduce(t, y) })),
        ("pairwise_distance", vec![a(), uniform(&[2, 4], -1.0, 1.0, 17)], Box::new(|t, v| { let y = t.pairwise_distance(v[0], v[1])?; reduce(t, y) })),
        ("grad (second order)", vec![a()], Box::new(|t, v| {
            // ∂/∂x of Σ w ⊙ (∂/∂x Σ exp(x)·x)
            let e = t.exp(v[0]);
            let f = t.mul(e, v[0])?;
            let f = t.sum(f);
            let g = t.grad(f, &[v[0]])?[0];
            reduce(t, g)
        })),
    ]
}

/// Names of every operation covered by [`op_checks`].
pub fn op_names() -> Vec<&'static str> {
    cases().into_iter().map(|c| c.0).collect()
}

/// Central-difference check of every tape operation at tolerance `tol`.
pub fn op_checks(tol: f64) -> Result<Vec<OpCheck>> {
    cases()
        .into_iter()
        .map(|(name, inputs, f)| {
            Ok(OpCheck {
                name: name.to_string(),
                report: gradcheck(&inputs, tol, |t, v| f(t, v))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for c in op_checks(1e-5).unwrap() {
            assert!(c.report.passed, "{}: {:?}", c.name, c.report);
        }
    }
}
