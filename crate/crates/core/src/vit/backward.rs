//! Reverse-mode gradients of the mean cross-entropy loss, derived by hand
//! for each block of the forward pass.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gelu_grad_scalar, matmul, matmul_nt, matmul_tn, LayerNormCache, Tensor};

use super::forward::{head_slice, head_write, ForwardCache};
use super::{Engine, Parameters, Vit};

/// Samples per sequential accumulation chunk. Fixed so that the reduction
/// order, and therefore the result, is independent of the thread count.
const CHUNK: usize = 8;

#[derive(Clone, Debug)]
pub struct LossAndGrads<T> {
    pub loss: T,
    /// Samples whose argmax prediction matched the label.
    pub correct: usize,
    pub grads: Parameters<T>,
}

/// Mean cross-entropy over the batch and its gradient for every parameter.
pub fn loss_and_grads<T: Scalar>(
    vit: &Vit<T>,
    images: &[Tensor<T>],
    labels: &[usize],
) -> Result<LossAndGrads<T>> {
    if images.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::CountMismatch {
            images: images.len(),
            labels: labels.len(),
        });
    }
    let weight = T::one() / T::lit(images.len() as f64);
    let partials: Vec<Result<(T, usize, Parameters<T>)>> = images
        .par_chunks(CHUNK)
        .zip(labels.par_chunks(CHUNK))
        .map(|(imgs, labs)| {
            let mut grads = vit.params.zeros_like();
            let mut loss = T::zero();
            let mut correct = 0;
            for (img, &lab) in imgs.iter().zip(labs) {
                let (l, hit) = sample_backward(vit, img, lab, weight, &mut grads)?;
                loss += l;
                correct += hit as usize;
            }
            Ok((loss, correct, grads))
        })
        .collect();
    let mut total = T::zero();
    let mut correct = 0;
    let mut grads: Option<Parameters<T>> = None;
    for part in partials {
        let (loss, hits, g) = part?;
        total += loss;
        correct += hits;
        match grads.as_mut() {
            None => grads = Some(g),
            Some(acc) => acc.accumulate(&g),
        }
    }
    let loss = total * weight;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    Ok(LossAndGrads {
        loss,
        correct,
        grads: grads.expect("non-empty batch"),
    })
}

/// Layer-norm backward: returns dx and accumulates the affine gradients.
fn ln_backward<T: Scalar>(
    dy: &Tensor<T>,
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    dgamma: &mut Tensor<T>,
    dbeta: &mut Tensor<T>,
) -> Tensor<T> {
    let d = dy.cols();
    let n = T::lit(d as f64);
    let mut dx = dy.clone();
    for r in 0..dy.rows() {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        let inv = cache.inv_std[r];
        let mut mean_dxh = T::zero();
        let mut mean_dxh_xh = T::zero();
        for j in 0..d {
            let dxh = dyr[j] * gamma.data()[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[j];
            dgamma.data_mut()[j] += dyr[j] * xh[j];
            dbeta.data_mut()[j] += dyr[j];
        }
        mean_dxh /= n;
        mean_dxh_xh /= n;
        let out = dx.row_mut(r);
        for j in 0..d {
            let dxh = dyr[j] * gamma.data()[j];
            out[j] = inv * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    dx
}

fn acc<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>) -> Result<()> {
    dst.add_assign(src)
}

fn acc_linear<T: Scalar>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    dw: &mut Tensor<T>,
    db: &mut Tensor<T>,
) -> Result<()> {
    acc(dw, &matmul_tn(x, dy)?)?;
    acc(db, &dy.sum_rows())
}

/// Forward with caching, then backward for one sample. Gradients are scaled
/// by `weight` and added into `grads`; returns the unscaled loss and
/// whether the prediction was correct.
fn sample_backward<T: Scalar>(
    vit: &Vit<T>,
    image: &Tensor<T>,
    label: usize,
    weight: T,
    grads: &mut Parameters<T>,
) -> Result<(T, bool)> {
    let cfg = &vit.config;
    let params = &vit.params;
    if label >= cfg.num_classes {
        return Err(Error::Invalid(format!(
            "label {label} >= {} classes",
            cfg.num_classes
        )));
    }
    let mut cache = ForwardCache::default();
    let logits = Engine::new(vit).run(image, None, Some(&mut cache))?;

    let z = logits.data();
    let max = z.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let sum: T = z.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    let loss = lse - z[label];
    let dlogits: Vec<T> = z
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let p = (v - lse).exp();
            let t = if i == label { T::one() } else { T::zero() };
            (p - t) * weight
        })
        .collect();
    let dlogits = Tensor::new(&[1, cfg.num_classes], dlogits)?;

    let c = cache.cls_out.as_ref().expect("cached");
    acc_linear(c, &dlogits, &mut grads.head_w, &mut grads.head_b)?;
    let dc = matmul_nt(&dlogits, &params.head_w)?;
    let dcls = ln_backward(
        &dc,
        cache.lnf.as_ref().expect("cached"),
        &params.norm_g,
        &mut grads.norm_g,
        &mut grads.norm_b,
    );

    let s = cfg.seq_len();
    let d = cfg.embed_dim;
    let dh = cfg.head_dim();
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut dx = Tensor::zeros(&[s, d]);
    dx.row_mut(0).copy_from_slice(dcls.data());

    for l in (0..cfg.num_layers).rev() {
        let lc = &cache.layers[l];
        let lp = &params.layers[l];
        let gl = &mut grads.layers[l];

        // MLP branch.
        acc_linear(&lc.g, &dx, &mut gl.w_fc2, &mut gl.b_fc2)?;
        let dg = matmul_nt(&dx, &lp.w_fc2)?;
        let mut du = dg;
        for (g, &u) in du.data_mut().iter_mut().zip(lc.u.data()) {
            *g *= gelu_grad_scalar(u);
        }
        acc_linear(&lc.h2, &du, &mut gl.w_fc1, &mut gl.b_fc1)?;
        let dh2 = matmul_nt(&du, &lp.w_fc1)?;
        dx.add_assign(&ln_backward(
            &dh2,
            &lc.ln2,
            &lp.ln2_g,
            &mut gl.ln2_g,
            &mut gl.ln2_b,
        ))?;

        // Attention branch.
        acc_linear(&lc.o, &dx, &mut gl.w_proj, &mut gl.b_proj)?;
        let d_o = matmul_nt(&dx, &lp.w_proj)?;
        let mut dq = Tensor::zeros(&[s, d]);
        let mut dk = Tensor::zeros(&[s, d]);
        let mut dv = Tensor::zeros(&[s, d]);
        for head in 0..cfg.num_heads {
            let a = &lc.attn[head];
            let qh = head_slice(&lc.q, head, dh);
            let kh = head_slice(&lc.k, head, dh);
            let vh = head_slice(&lc.v, head, dh);
            let doh = head_slice(&d_o, head, dh);
            let da = matmul_nt(&doh, &vh)?;
            let dvh = matmul_tn(a, &doh)?;
            // Softmax Jacobian, row by row: dS = A ⊙ (dA − ⟨dA, A⟩).
            let mut ds = da;
            for r in 0..s {
                let arow = a.row(r);
                let dot: T = ds.row(r).iter().zip(arow).map(|(&x, &y)| x * y).sum();
                for (g, &av) in ds.row_mut(r).iter_mut().zip(arow) {
                    *g = av * (*g - dot) * scale;
                }
            }
            let dqh = matmul(&ds, &kh)?;
            let dkh = matmul_tn(&ds, &qh)?;
            head_write(&mut dq, &dqh, head, dh);
            head_write(&mut dk, &dkh, head, dh);
            head_write(&mut dv, &dvh, head, dh);
        }
        acc_linear(&lc.h, &dq, &mut gl.w_q, &mut gl.b_q)?;
        acc_linear(&lc.h, &dk, &mut gl.w_k, &mut gl.b_k)?;
        acc_linear(&lc.h, &dv, &mut gl.w_v, &mut gl.b_v)?;
        let mut dhn = matmul_nt(&dq, &lp.w_q)?;
        dhn.add_assign(&matmul_nt(&dk, &lp.w_k)?)?;
        dhn.add_assign(&matmul_nt(&dv, &lp.w_v)?)?;
        dx.add_assign(&ln_backward(
            &dhn,
            &lc.ln1,
            &lp.ln1_g,
            &mut gl.ln1_g,
            &mut gl.ln1_b,
        ))?;
    }

    acc(&mut grads.pos, &dx)?;
    for (g, &v) in grads.cls.data_mut().iter_mut().zip(dx.row(0)) {
        *g += v;
    }
    let dtokens = Tensor::new(&[s - 1, d], dx.data()[d..].to_vec())?;
    let patches = cache.patches.as_ref().expect("cached");
    acc_linear(patches, &dtokens, &mut grads.patch_w, &mut grads.patch_b)?;
    Ok((loss, super::forward::argmax(z) == label))
}
