use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernel::{mmd_sq, KernelSpec};
use crate::measure::DiscreteMeasure;
use crate::tensor::Tensor;

fn check_label(c: usize, label: usize) -> Result<()> {
    if label >= c {
        return Err(Error::Config(format!("label {label} out of range for {c} classes")));
    }
    Ok(())
}

/// `log Σ exp(ℓ) − ℓ_label`, shifted by the largest logit.
pub fn loss_classify(logits: &[f64], label: usize) -> Result<f64> {
    check_label(logits.len(), label)?;
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    Ok(s.ln() + m - logits[label])
}

/// Cross-entropy of a `[C]` logit vector on a tape.
pub fn cross_entropy_on_tape(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    let c = tape.value(logits).len();
    check_label(c, label)?;
    let m = tape.value(logits).data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted = tape.add_scalar(logits, -m);
    let e = tape.exp(shifted);
    let s = tape.sum(e);
    let lse = tape.log(s);
    let onehot = Tensor::from_fn(&[c], |i| if i == label { 1.0 } else { 0.0 });
    let picked = tape.mul_const(shifted, onehot)?;
    let picked = tape.sum(picked);
    tape.sub(lse, picked)
}

/// Riesz-kernel `½MMD²` between prediction and target.
pub fn loss_complete(pred: &DiscreteMeasure, target: &DiscreteMeasure) -> Result<f64> {
    Ok(0.5 * mmd_sq(&KernelSpec::Riesz, pred, target)?)
}
