use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Outcome of comparing an analytic gradient with central finite differences.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    /// Normwise relative error of the whole gradient:
    /// `‖analytic − numeric‖∞ / max(‖analytic‖∞, ‖numeric‖∞, 1e-12)`, with both
    /// norms taken over every input together.
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
    /// Per-input errors, in input order, against the same common scale.
    pub per_input: Vec<f64>,
}

pub const FD_STEP: f64 = 1e-5;

/// Compares `grad_fn` against central differences of `value_fn` (step [`FD_STEP`]).
pub fn check_gradient<V, G>(
    inputs: &[Tensor],
    tol: f64,
    value_fn: V,
    grad_fn: G,
) -> Result<GradcheckReport>
where
    V: Fn(&[Tensor]) -> Result<f64>,
    G: Fn(&[Tensor]) -> Result<Vec<Tensor>>,
{
    let analytic = grad_fn(inputs)?;
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for k in 0..analytic.len() {
        let mut num = Tensor::zeros(inputs[k].shape());
        for e in 0..inputs[k].len() {
            let x0 = inputs[k].data()[e];
            probe[k].data_mut()[e] = x0 + FD_STEP;
            let fp = value_fn(&probe)?;
            probe[k].data_mut()[e] = x0 - FD_STEP;
            let fm = value_fn(&probe)?;
            probe[k].data_mut()[e] = x0;
            num.data_mut()[e] = (fp - fm) / (2.0 * FD_STEP);
        }
        numeric.push(num);
    }
    let scale = analytic
        .iter()
        .chain(&numeric)
        .flat_map(|t| t.data())
        .fold(1e-12f64, |m, v| m.max(v.abs()));
    let per_input: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| a.max_abs_diff(n) / scale)
        .collect();
    let max_rel_err = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradcheckReport {
        max_rel_err,
        tol,
        passed: max_rel_err <= tol,
        per_input,
    })
}

/// Gradient check for a scalar function built on a [`Tape`].
///
/// `f` receives fresh leaves for `inputs` and returns the scalar output.
pub fn gradcheck<F>(inputs: &[Tensor], tol: f64, f: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_gradient(
        inputs,
        tol,
        |xs| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
            let out = f(&mut tape, &vars)?;
            Ok(tape.value(out).item())
        },
        |xs| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
            let out = f(&mut tape, &vars)?;
            tape.grad_values(out, &vars)
        },
    )
}
