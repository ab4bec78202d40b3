//! Affine coupling `q(Z̃) = [Z̃₁, Z̃₂ ⊙ exp(φ(Z̃₁)) + ψ(Z̃₁)]` over column halves.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::net::layers::ffn;
use crate::net::{Bound, ModelParams};
use crate::tensor::Tensor;

fn halves(tape: &mut Tape, z: Var) -> Result<(Var, Var, usize)> {
    let p = tape.value(z).cols();
    if p % 2 != 0 {
        return Err(Error::OddLatentDim(p));
    }
    let h = p / 2;
    Ok((tape.slice_cols(z, 0, h)?, tape.slice_cols(z, h, h)?, h))
}

/// Forward coupling on a tape; masked rows come out zero.
pub fn coupling_on_tape(tape: &mut Tape, p: &Bound, z: Var, mask: &[bool]) -> Result<Var> {
    let (z1, z2, _) = halves(tape, z)?;
    let phi = ffn(tape, p, "coupling.phi", z1)?;
    let psi = ffn(tape, p, "coupling.psi", z1)?;
    let s = tape.exp(phi);
    let y = tape.mul(z2, s)?;
    let y = tape.add(y, psi)?;
    let out = tape.concat_cols(&[z1, y])?;
    tape.mask_rows(out, mask)
}

/// Inverse coupling on a tape: `[Z₁, (Z₂ − ψ(Z₁)) ⊙ exp(−φ(Z₁))]`.
pub fn coupling_inverse_on_tape(tape: &mut Tape, p: &Bound, z: Var, mask: &[bool]) -> Result<Var> {
    let (z1, z2, _) = halves(tape, z)?;
    let phi = ffn(tape, p, "coupling.phi", z1)?;
    let psi = ffn(tape, p, "coupling.psi", z1)?;
    let s = tape.neg(phi);
    let s = tape.exp(s);
    let y = tape.sub(z2, psi)?;
    let y = tape.mul(y, s)?;
    let out = tape.concat_cols(&[z1, y])?;
    tape.mask_rows(out, mask)
}

fn eval(params: &ModelParams, z: &Tensor, inverse: bool) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let zv = tape.constant(z.clone());
    let mask = vec![true; z.rows()];
    let out = if inverse {
        coupling_inverse_on_tape(&mut tape, &p, zv, &mask)?
    } else {
        coupling_on_tape(&mut tape, &p, zv, &mask)?
    };
    Ok(tape.value(out).clone())
}

/// `q(Z̃)`, row by row.
pub fn coupling_forward(params: &ModelParams, z: &Tensor) -> Result<Tensor> {
    eval(params, z, false)
}

/// `q⁻¹(Z)`, row by row.
pub fn coupling_inverse(params: &ModelParams, z: &Tensor) -> Result<Tensor> {
    eval(params, z, true)
}
