use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::net::layers::{bilinear_forward, encoder_block, ffn, ffn_norm, layer_norm};
use crate::net::{Bound, ModelParams};
use crate::tensor::Tensor;

/// The `X`-only half of the network: it does not depend on `Z`, so a solver
/// computes it once and reuses it at every inner step.
#[derive(Clone, Debug)]
pub struct Source {
    /// Mean of the bilinear-width `X` stream over active rows.
    pub x_bar: Var,
    /// Self-encoded `X` stream, the cross-encoder's source.
    pub encoded: Var,
    pub mask: Vec<bool>,
}

/// Values of a [`Source`], detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSource {
    pub x_bar: Arc<Tensor>,
    pub encoded: Arc<Tensor>,
    pub mask: Vec<bool>,
}

impl Source {
    pub fn freeze(&self, tape: &Tape) -> EncodedSource {
        EncodedSource {
            x_bar: tape.shared(self.x_bar),
            encoded: tape.shared(self.encoded),
            mask: self.mask.clone(),
        }
    }
}

impl EncodedSource {
    /// Registers the values on `tape` as constants.
    pub fn attach(&self, tape: &mut Tape) -> Source {
        Source {
            x_bar: tape.constant(self.x_bar.clone()),
            encoded: tape.constant(self.encoded.clone()),
            mask: self.mask.clone(),
        }
    }
}

fn check_rows(tape: &Tape, v: Var, cols: usize, mask: &[bool], what: &str) -> Result<()> {
    let t = tape.value(v);
    if t.rank() != 2 || t.cols() != cols {
        return Err(Error::DimensionMismatch {
            expected: cols,
            got: if t.rank() == 2 { t.cols() } else { t.len() },
        });
    }
    if mask.len() != t.rows() {
        return Err(Error::shape(format!(
            "{what}: {} rows but mask of {}",
            t.rows(),
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::AllMasked);
    }
    Ok(())
}

/// `X → LN(FFN(X))` to bilinear width, then to latent width and through the
/// `X` self-encoders.
pub fn encode_source(tape: &mut Tape, p: &Bound, params: &ModelParams, x: Var, x_mask: &[bool]) -> Result<Source> {
    let cfg = &params.config;
    check_rows(tape, x, cfg.data_dim, x_mask, "X")?;
    let xb = ffn_norm(tape, p, "x_in", x, x_mask)?;
    let x_bar = tape.masked_mean_rows(xb, x_mask)?;
    let mut xs = ffn_norm(tape, p, "x_up", xb, x_mask)?;
    for l in 0..cfg.self_encoder_layers {
        xs = encoder_block(tape, p, &format!("x_self.{l}"), xs, xs, x_mask, x_mask, cfg.per_head_dim)?;
    }
    Ok(Source {
        x_bar,
        encoded: xs,
        mask: x_mask.to_vec(),
    })
}

/// The `Z` half of the network given an encoded source.
///
/// Rows with `pins[i]` are reset to `z` after every encoder and at the output.
pub fn latent_forward(
    tape: &mut Tape,
    p: &Bound,
    params: &ModelParams,
    z: Var,
    z_mask: &[bool],
    pins: &[bool],
    src: &Source,
) -> Result<Var> {
    let cfg = &params.config;
    check_rows(tape, z, cfg.latent_dim, z_mask, "Z")?;
    if pins.len() != z_mask.len() {
        return Err(Error::shape(format!(
            "pin mask of {} for {} rows",
            pins.len(),
            z_mask.len()
        )));
    }
    let pin = |tape: &mut Tape, h: Var| tape.overwrite_rows(h, z, pins);

    let a = ffn_norm(tape, p, "z_in", z, z_mask)?;
    let beta = if cfg.pushforward_only {
        None
    } else {
        Some(p.get("bil.beta")?)
    };
    let bil = bilinear_forward(tape, a, z_mask, src.x_bar, p.get("bil.alpha")?, beta)?;
    let r = tape.add(bil, a)?;
    let c = layer_norm(tape, p, "bil.ln", r)?;
    let c = tape.mask_rows(c, z_mask)?;
    let u = ffn(tape, p, "z_up.ffn", c)?;
    let r = tape.add(u, z)?;
    let h = layer_norm(tape, p, "z_up.ln", r)?;
    let mut h = tape.mask_rows(h, z_mask)?;

    if !cfg.pushforward_only {
        for l in 0..cfg.self_encoder_layers {
            h = encoder_block(tape, p, &format!("z_self.{l}"), h, h, z_mask, z_mask, cfg.per_head_dim)?;
            h = pin(tape, h)?;
        }
    }
    for l in 0..cfg.cross_encoder_layers {
        h = encoder_block(
            tape,
            p,
            &format!("cross.{l}"),
            h,
            src.encoded,
            z_mask,
            &src.mask,
            cfg.per_head_dim,
        )?;
        h = pin(tape, h)?;
    }
    let out = ffn_norm(tape, p, "out", h, z_mask)?;
    pin(tape, out)
}

/// `F_θ(Z, X)` on a tape.
#[allow(clippy::too_many_arguments)]
pub fn core_forward(
    tape: &mut Tape,
    p: &Bound,
    params: &ModelParams,
    z: Var,
    z_mask: &[bool],
    pins: &[bool],
    x: Var,
    x_mask: &[bool],
) -> Result<Var> {
    let src = encode_source(tape, p, params, x, x_mask)?;
    latent_forward(tape, p, params, z, z_mask, pins, &src)
}

/// `F_θ(Z, X)` evaluated directly.
pub fn ddeq_core_forward(
    params: &ModelParams,
    z: &Tensor,
    z_mask: &[bool],
    x: &Tensor,
    x_mask: &[bool],
    pins: &[bool],
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let zv = tape.constant(z.clone());
    let xv = tape.constant(x.clone());
    let out = core_forward(&mut tape, &p, params, zv, z_mask, pins, xv, x_mask)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::rng_from_seed;
    use crate::net::{init_params, ModelConfig};
    use rand::Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.5..1.5))
    }

    fn small(pushforward_only: bool) -> ModelParams {
        let cfg = ModelConfig {
            latent_dim: 8,
            bilinear_dim: 4,
            cross_encoder_layers: 2,
            pushforward_only,
            ..ModelConfig::desk(2)
        };
        init_params(&cfg, 11).unwrap()
    }

    #[test]
    fn finite_at_init() {
        let params = init_params(&ModelConfig::desk(3), 0).unwrap();
        let out = ddeq_core_forward(
            &params,
            &rand_t(&[10, 32], 1),
            &[true; 10],
            &rand_t(&[20, 3], 2),
            &[true; 20],
            &[false; 10],
        )
        .unwrap();
        assert!(out.all_finite());
    }

    #[test]
    fn all_pinned_returns_input() {
        let params = small(false);
        let z = rand_t(&[5, 8], 3);
        let out = ddeq_core_forward(&params, &z, &[true; 5], &rand_t(&[4, 2], 4), &[true; 4], &[true; 5]).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn equivariant_in_z_invariant_in_x() {
        let params = small(false);
        let z = rand_t(&[5, 8], 5);
        let x = rand_t(&[6, 2], 6);
        let base = ddeq_core_forward(&params, &z, &[true; 5], &x, &[true; 6], &[false; 5]).unwrap();
        let pz = [3, 0, 4, 1, 2];
        let px = [5, 2, 0, 1, 4, 3];
        let out = ddeq_core_forward(
            &params,
            &z.select_rows(&pz),
            &[true; 5],
            &x.select_rows(&px),
            &[true; 6],
            &[false; 5],
        )
        .unwrap();
        assert!(out.max_abs_diff(&base.select_rows(&pz)) <= 1e-10);
    }

    #[test]
    fn padding_is_inert() {
        let params = small(false);
        let z = rand_t(&[4, 8], 7);
        let x = rand_t(&[5, 2], 8);
        let pins = [true, false, false, true];
        let base = ddeq_core_forward(&params, &z, &[true; 4], &x, &[true; 5], &pins).unwrap();
        let zp = Tensor::vstack(&[&z, &Tensor::zeros(&[2, 8])]).unwrap();
        let xp = Tensor::vstack(&[&x, &Tensor::zeros(&[3, 2])]).unwrap();
        let zm = [true, true, true, true, false, false];
        let xm = [true, true, true, true, true, false, false, false];
        let pp = [true, false, false, true, false, false];
        let out = ddeq_core_forward(&params, &zp, &zm, &xp, &xm, &pp).unwrap();
        for i in 0..4 {
            for c in 0..8 {
                assert!((out.at(i, c) - base.at(i, c)).abs() <= 1e-12);
            }
        }
        assert!(out.data()[32..].iter().all(|&v| v == 0.0));
        for i in [0, 3] {
            assert_eq!(out.row(i), z.row(i));
        }
    }

    #[test]
    fn pushforward_variant_acts_per_row() {
        let params = small(true);
        let z = rand_t(&[4, 8], 9);
        let x = rand_t(&[3, 2], 10);
        let base = ddeq_core_forward(&params, &z, &[true; 4], &x, &[true; 3], &[false; 4]).unwrap();
        let mut z2 = z.clone();
        for c in 0..8 {
            z2.row_mut(2)[c] += 0.7;
        }
        let out = ddeq_core_forward(&params, &z2, &[true; 4], &x, &[true; 3], &[false; 4]).unwrap();
        for i in [0, 1, 3] {
            assert_eq!(out.row(i), base.row(i));
        }
        assert_ne!(out.row(2), base.row(2));
    }

    #[test]
    fn cached_source_matches_full_forward() {
        let params = small(false);
        let z = rand_t(&[4, 8], 12);
        let x = rand_t(&[5, 2], 13);
        let full = ddeq_core_forward(&params, &z, &[true; 4], &x, &[true; 5], &[false; 4]).unwrap();
        let mut t = Tape::new();
        let p = params.bind(&mut t, false);
        let xv = t.constant(x);
        let frozen = encode_source(&mut t, &p, &params, xv, &[true; 5]).unwrap().freeze(&t);
        let mut t2 = Tape::new();
        let p2 = params.bind(&mut t2, false);
        let src = frozen.attach(&mut t2);
        let zv = t2.constant(z);
        let out = latent_forward(&mut t2, &p2, &params, zv, &[true; 4], &[false; 4], &src).unwrap();
        assert_eq!(t2.value(out), &full);
    }
}
