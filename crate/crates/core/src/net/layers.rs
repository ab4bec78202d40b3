use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::net::{Bound, LN_EPS};
use crate::tensor::Tensor;

/// Per-particle two-layer network `relu(x W₁ + b₁) W₂ + b₂`.
pub(crate) fn ffn(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = tape.affine(x, p.get(&format!("{prefix}.w1"))?, p.get(&format!("{prefix}.b1"))?)?;
    let h = tape.relu(h);
    tape.affine(h, p.get(&format!("{prefix}.w2"))?, p.get(&format!("{prefix}.b2"))?)
}

pub(crate) fn layer_norm(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let g = p.get(&format!("{prefix}.gain"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    tape.layer_norm(x, g, b, LN_EPS)
}

/// `LN(FFN(x))` with masked rows zeroed.
pub(crate) fn ffn_norm(tape: &mut Tape, p: &Bound, prefix: &str, x: Var, mask: &[bool]) -> Result<Var> {
    let h = ffn(tape, p, &format!("{prefix}.ffn"), x)?;
    let h = layer_norm(tape, p, &format!("{prefix}.ln"), h)?;
    tape.mask_rows(h, mask)
}

/// `out = Z W_α + 1 (Z̄ W_β)` with `W_α[l, j] = Σₙ α[l, j, n] X̄ₙ`.
///
/// `Z̄` and `X̄` are means over active rows, so the result does not scale with
/// the particle counts. Without `beta` the map acts on each row of `Z` alone.
pub fn bilinear_forward(
    tape: &mut Tape,
    z: Var,
    z_mask: &[bool],
    x_bar: Var,
    alpha: Var,
    beta: Option<Var>,
) -> Result<Var> {
    let q = tape.value(z).cols();
    let shape = tape.shape(alpha).to_vec();
    if shape != [q, q, q] || tape.value(x_bar).len() != q {
        return Err(Error::shape(format!(
            "bilinear: Z has {q} columns, α is {shape:?}, X̄ has {}",
            tape.value(x_bar).len()
        )));
    }
    let n = tape.value(z).rows();
    let xc = tape.reshape(x_bar, &[q, 1])?;
    let contract = |tape: &mut Tape, t: Var| -> Result<Var> {
        let flat = tape.reshape(t, &[q * q, q])?;
        let w = tape.matmul(flat, xc)?;
        tape.reshape(w, &[q, q])
    };
    let wa = contract(tape, alpha)?;
    let mut out = tape.matmul(z, wa)?;
    if let Some(beta) = beta {
        let wb = contract(tape, beta)?;
        let zbar = tape.masked_mean_rows(z, z_mask)?;
        let zbar = tape.reshape(zbar, &[1, q])?;
        let shared = tape.matmul(zbar, wb)?;
        let shared = tape.reshape(shared, &[q])?;
        let shared = tape.broadcast_axis(shared, 0, n)?;
        out = tape.add(out, shared)?;
    }
    tape.mask_rows(out, z_mask)
}

/// Multi-head scaled dot-product attention from `tgt` rows onto `src` rows.
///
/// Parameters live under `{prefix}.w{q,k,v,o}` and `{prefix}.b{q,k,v,o}`.
pub fn multihead_attention(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    tgt: Var,
    src: Var,
    tgt_mask: &[bool],
    src_mask: &[bool],
    per_head_dim: usize,
) -> Result<Var> {
    if !src_mask.iter().any(|&m| m) {
        return Err(Error::AllSourcesMasked);
    }
    let (n, dim) = (tape.value(tgt).rows(), tape.value(tgt).cols());
    let m = tape.value(src).rows();
    if src_mask.len() != m || tgt_mask.len() != n || dim % per_head_dim != 0 {
        return Err(Error::shape(format!(
            "attention: tgt {n}×{dim}, src {m} rows, masks {}/{}, head dim {per_head_dim}",
            tgt_mask.len(),
            src_mask.len()
        )));
    }
    let proj = |tape: &mut Tape, x: Var, k: &str| -> Result<Var> {
        tape.affine(x, p.get(&format!("{prefix}.w{k}"))?, p.get(&format!("{prefix}.b{k}"))?)
    };
    let q = proj(tape, tgt, "q")?;
    let k = proj(tape, src, "k")?;
    let v = proj(tape, src, "v")?;
    let allowed = Tensor::from_fn(&[n, m], |e| if src_mask[e % m] { 1.0 } else { 0.0 });
    let tau = 1.0 / (per_head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(dim / per_head_dim);
    for h in 0..dim / per_head_dim {
        let start = h * per_head_dim;
        let qh = tape.slice_cols(q, start, per_head_dim)?;
        let kh = tape.slice_cols(k, start, per_head_dim)?;
        let vh = tape.slice_cols(v, start, per_head_dim)?;
        let logits = tape.matmul_t(qh, kh, false, true)?;
        let logits = tape.scale(logits, tau);
        let attn = tape.masked_softmax(logits, &allowed)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let cat = tape.concat_cols(&heads)?;
    let out = proj(tape, cat, "o")?;
    tape.mask_rows(out, tgt_mask)
}

/// Attention, add & norm, feed-forward, add & norm.
///
/// Self-attention when `src` is `x` itself.
pub fn encoder_block(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    x: Var,
    src: Var,
    x_mask: &[bool],
    src_mask: &[bool],
    per_head_dim: usize,
) -> Result<Var> {
    let a = multihead_attention(
        tape,
        p,
        &format!("{prefix}.attn"),
        x,
        src,
        x_mask,
        src_mask,
        per_head_dim,
    )?;
    let r = tape.add(x, a)?;
    let h = layer_norm(tape, p, &format!("{prefix}.ln1"), r)?;
    let h = tape.mask_rows(h, x_mask)?;
    let f = ffn(tape, p, &format!("{prefix}.ffn"), h)?;
    let r = tape.add(h, f)?;
    let out = layer_norm(tape, p, &format!("{prefix}.ln2"), r)?;
    tape.mask_rows(out, x_mask)
}

/// Max over active particles, then `head.w`, `head.b`.
pub fn classify_head(tape: &mut Tape, p: &Bound, z: Var, mask: &[bool]) -> Result<Var> {
    let k = tape.value(z).cols();
    let pooled = tape.masked_max_rows(z, mask)?;
    let pooled = tape.reshape(pooled, &[1, k])?;
    let logits = tape.affine(pooled, p.get("head.w")?, p.get("head.b")?)?;
    let c = tape.value(logits).cols();
    tape.reshape(logits, &[c])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::rng_from_seed;
    use crate::net::{init_params, ModelConfig};
    use rand::Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn bilinear_hand_example() {
        // N=1, M=2, q=1: 2 · mean(1, 3) · 1 = 4
        let mut t = Tape::new();
        let z = t.constant(Tensor::from_vec(&[1, 1], vec![2.0]).unwrap());
        let xbar = t.constant(Tensor::from_vec(&[1], vec![2.0]).unwrap());
        let a = t.constant(Tensor::full(&[1, 1, 1], 1.0));
        let b = t.constant(Tensor::zeros(&[1, 1, 1]));
        let out = bilinear_forward(&mut t, z, &[true], xbar, a, Some(b)).unwrap();
        assert_eq!(t.value(out).data(), &[4.0]);
    }

    #[test]
    fn bilinear_zero_tensors_give_zero() {
        let mut t = Tape::new();
        let z = t.constant(rand_t(&[4, 3], 1));
        let xbar = t.constant(rand_t(&[3], 2));
        let a = t.constant(Tensor::zeros(&[3, 3, 3]));
        let out = bilinear_forward(&mut t, z, &[true; 4], xbar, a, Some(a)).unwrap();
        assert!(t.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bilinear_index_formula() {
        let (q, n) = (3, 4);
        let zt = rand_t(&[n, q], 3);
        let xb = rand_t(&[q], 4);
        let al = rand_t(&[q, q, q], 5);
        let be = rand_t(&[q, q, q], 6);
        let mut t = Tape::new();
        let vars = [zt.clone(), xb.clone(), al.clone(), be.clone()].map(|v| t.constant(v));
        let out = bilinear_forward(&mut t, vars[0], &[true; 4], vars[1], vars[2], Some(vars[3])).unwrap();
        let zbar: Vec<f64> = (0..q).map(|l| (0..n).map(|i| zt.at(i, l)).sum::<f64>() / n as f64).collect();
        for i in 0..n {
            for j in 0..q {
                let mut want = 0.0;
                for l in 0..q {
                    for m in 0..q {
                        let idx = (l * q + j) * q + m;
                        want += al.data()[idx] * zt.at(i, l) * xb.data()[m]
                            + be.data()[idx] * zbar[l] * xb.data()[m];
                    }
                }
                assert!((t.value(out).at(i, j) - want).abs() < 1e-12);
            }
        }
    }

    fn attention_params(p: usize) -> (crate::net::ModelParams, Tape, Bound) {
        let params = init_params(&ModelConfig { latent_dim: p, ..ModelConfig::desk(2) }, 3).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        (params, tape, bound)
    }

    #[test]
    fn single_source_passes_its_value_projection() {
        let (params, mut t, b) = attention_params(8);
        let tgt = t.constant(rand_t(&[3, 8], 1));
        let src = t.constant(rand_t(&[2, 8], 2));
        let out = multihead_attention(&mut t, &b, "cross.0.attn", tgt, src, &[true; 3], &[false, true], 4).unwrap();
        let srow = Tensor::from_vec(&[1, 8], t.value(src).row(1).to_vec()).unwrap();
        let wv = params.get("cross.0.attn.wv").unwrap();
        let wo = params.get("cross.0.attn.wo").unwrap();
        let mut v = Tensor::matmul(&srow, wv, false, false).unwrap();
        for (x, bv) in v.data_mut().iter_mut().zip(params.get("cross.0.attn.bv").unwrap().data()) {
            *x += bv;
        }
        let mut o = Tensor::matmul(&v, wo, false, false).unwrap();
        for (x, bo) in o.data_mut().iter_mut().zip(params.get("cross.0.attn.bo").unwrap().data()) {
            *x += bo;
        }
        for i in 0..3 {
            for c in 0..8 {
                assert!((t.value(out).at(i, c) - o.data()[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_queries_average_values() {
        let (mut params, _, _) = attention_params(8);
        params.set("cross.0.attn.wq", Tensor::zeros(&[8, 8])).unwrap();
        params.set("cross.0.attn.bq", Tensor::zeros(&[8])).unwrap();
        params.set("cross.0.attn.wo", Tensor::from_fn(&[8, 8], |e| if e / 8 == e % 8 { 1.0 } else { 0.0 })).unwrap();
        params.set("cross.0.attn.bo", Tensor::zeros(&[8])).unwrap();
        let mut t = Tape::new();
        let b = params.bind(&mut t, false);
        let src_t = rand_t(&[4, 8], 7);
        let tgt = t.constant(rand_t(&[2, 8], 6));
        let src = t.constant(src_t.clone());
        let mask = [true, true, false, true];
        let out = multihead_attention(&mut t, &b, "cross.0.attn", tgt, src, &[true; 2], &mask, 4).unwrap();
        let v = Tensor::matmul(&src_t, params.get("cross.0.attn.wv").unwrap(), false, false).unwrap();
        for c in 0..8 {
            let bv = params.get("cross.0.attn.bv").unwrap().data()[c];
            let mean = [0, 1, 3].iter().map(|&j| v.at(j, c) + bv).sum::<f64>() / 3.0;
            assert!((t.value(out).at(0, c) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn all_sources_masked_is_an_error() {
        let (_, mut t, b) = attention_params(8);
        let x = t.constant(rand_t(&[2, 8], 1));
        let r = multihead_attention(&mut t, &b, "cross.0.attn", x, x, &[true; 2], &[false; 2], 4);
        assert!(matches!(r, Err(Error::AllSourcesMasked)));
    }

    #[test]
    fn head_ignores_masked_rows_and_order() {
        let params = init_params(&ModelConfig::desk(2).with_classes(3), 1).unwrap();
        let z = rand_t(&[5, 32], 9);
        let logits = |z: Tensor, mask: &[bool]| {
            let mut t = Tape::new();
            let b = params.bind(&mut t, false);
            let zv = t.constant(z);
            let l = classify_head(&mut t, &b, zv, mask).unwrap();
            t.value(l).clone()
        };
        let base = logits(z.clone(), &[true; 5]);
        let perm = z.select_rows(&[4, 2, 0, 1, 3]);
        assert_eq!(logits(perm, &[true; 5]), base);
        let padded = Tensor::vstack(&[&z, &Tensor::zeros(&[2, 32])]).unwrap();
        assert_eq!(logits(padded, &[true, true, true, true, true, false, false]), base);
    }

    #[test]
    fn head_of_single_particle_is_affine() {
        let params = init_params(&ModelConfig::desk(2).with_classes(2), 1).unwrap();
        let z = rand_t(&[1, 32], 3);
        let mut t = Tape::new();
        let b = params.bind(&mut t, false);
        let zv = t.constant(z.clone());
        let l = classify_head(&mut t, &b, zv, &[true]).unwrap();
        let mut want = Tensor::matmul(&z, params.get("head.w").unwrap(), false, false).unwrap();
        for (x, bb) in want.data_mut().iter_mut().zip(params.get("head.b").unwrap().data()) {
            *x += bb;
        }
        assert!(t.value(l).max_abs_diff(&want.reshaped(&[2]).unwrap()) < 1e-15);
    }
}
