//! Manual backprop through the backbone. Gradients accumulate into a
//! `BackboneParams` used as the gradient container; `dX` always flows down to
//! `stop_layer` while parameter gradients are only accumulated for layers the
//! caller marks trainable.

use super::forward::{gelu_grad, layer_norm_backward, FwdCache};
use super::{BackboneConfig, BackboneParams, FlowInstance, LayerParams};
use crate::mat::Mat;
use crate::real::Real;

#[derive(Debug, Clone)]
pub struct BackwardOpts {
    /// 1-based; gradients do not propagate below this layer's input.
    pub stop_layer: usize,
    pub train_embeddings: bool,
    /// Output head and final layer norm.
    pub train_head: bool,
    /// layer_trainable[l-1] marks layer l's parameters as accumulating.
    pub layer_trainable: Vec<bool>,
}

impl BackwardOpts {
    pub fn train_all(num_layers: usize) -> Self {
        BackwardOpts {
            stop_layer: 1,
            train_embeddings: true,
            train_head: true,
            layer_trainable: vec![true; num_layers],
        }
    }

    pub fn range(num_layers: usize, lo: usize, hi: usize, train_head: bool) -> Self {
        BackwardOpts {
            stop_layer: lo,
            train_embeddings: false,
            train_head,
            layer_trainable: (1..=num_layers).map(|l| l >= lo && l <= hi).collect(),
        }
    }
}

fn colsum_acc<T: Real>(dst: &mut [T], m: &Mat<T>) {
    for r in 0..m.rows() {
        crate::mat::axpy(dst, T::one(), m.row(r));
    }
}

/// dp(full seq x seq) = dctx_h @ V_h^T
fn head_dprobs<T: Real>(dctx: &Mat<T>, v: &Mat<T>, head: usize, dh: usize, dp: &mut Mat<T>) {
    let seq = dctx.rows();
    let d = dctx.cols();
    unsafe {
        T::gemm(
            seq,
            dh,
            seq,
            T::one(),
            dctx.as_slice().as_ptr().add(head * dh),
            d as isize,
            1,
            v.as_slice().as_ptr().add(head * dh),
            1,
            d as isize,
            T::zero(),
            dp.as_mut_slice().as_mut_ptr(),
            seq as isize,
            1,
        );
    }
}

/// dq_h += ds @ K_h * scale ; dk_h += ds^T @ Q_h * scale ; dv_h += P^T @ dctx_h
#[allow(clippy::too_many_arguments)]
fn head_qkv_grads<T: Real>(
    ds: &Mat<T>,
    probs: &Mat<T>,
    q: &Mat<T>,
    k: &Mat<T>,
    dctx: &Mat<T>,
    head: usize,
    dh: usize,
    scale: T,
    dq: &mut Mat<T>,
    dk: &mut Mat<T>,
    dv: &mut Mat<T>,
) {
    let seq = ds.rows();
    let d = q.cols();
    unsafe {
        T::gemm(
            seq,
            seq,
            dh,
            scale,
            ds.as_slice().as_ptr(),
            seq as isize,
            1,
            k.as_slice().as_ptr().add(head * dh),
            d as isize,
            1,
            T::one(),
            dq.as_mut_slice().as_mut_ptr().add(head * dh),
            d as isize,
            1,
        );
        T::gemm(
            seq,
            seq,
            dh,
            scale,
            ds.as_slice().as_ptr(),
            1,
            seq as isize,
            q.as_slice().as_ptr().add(head * dh),
            d as isize,
            1,
            T::one(),
            dk.as_mut_slice().as_mut_ptr().add(head * dh),
            d as isize,
            1,
        );
        T::gemm(
            seq,
            seq,
            dh,
            T::one(),
            probs.as_slice().as_ptr(),
            1,
            seq as isize,
            dctx.as_slice().as_ptr().add(head * dh),
            d as isize,
            1,
            T::one(),
            dv.as_mut_slice().as_mut_ptr().add(head * dh),
            d as isize,
            1,
        );
    }
}

/// Backward through one block. Returns dX w.r.t. the block input when
/// `need_dx_in`, accumulating parameter grads into `g` when provided.
#[allow(clippy::too_many_arguments)]
fn layer_backward<T: Real>(
    lp: &LayerParams<T>,
    cfg: &BackboneConfig,
    attn: &super::AttentionSpec,
    x_in: &Mat<T>,
    lc: &super::forward::LayerCache<T>,
    dx_out: &Mat<T>,
    g: Option<&mut LayerParams<T>>,
    need_dx_in: bool,
) -> Option<Mat<T>> {
    let seq = x_in.rows();
    let d = cfg.width;
    let heads = cfg.heads;
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let train = g.is_some();
    // local accumulators so `g` can stay optional
    let mut gl = g;

    // ---- feed-forward branch ----
    // x_out = x_mid + gelu(ln2(x_mid) @ w1 + b1) @ w2 + b2
    let dff_out = dx_out; // residual branch
    let mut dff_act = Mat::matmul_nt(dff_out, &lp.w2);
    if let Some(g) = gl.as_deref_mut() {
        Mat::matmul_tn_acc(&mut g.w2, &lc.ff_act, dff_out);
        colsum_acc(&mut g.b2, dff_out);
    }
    // through GELU
    for (da, &pre) in dff_act
        .as_mut_slice()
        .iter_mut()
        .zip(lc.ff_pre.as_slice().iter())
    {
        *da *= gelu_grad(pre);
    }
    let dff_pre = dff_act;
    let dln2_out = Mat::matmul_nt(&dff_pre, &lp.w1);
    if let Some(g) = gl.as_deref_mut() {
        Mat::matmul_tn_acc(&mut g.w1, &lc.ln2.out, &dff_pre);
        colsum_acc(&mut g.b1, &dff_pre);
    }
    // dx_mid = dx_out (residual carry) + LN2 backward
    let mut dx_mid = dx_out.clone();
    {
        let (dgamma, dbeta) = match gl.as_deref_mut() {
            Some(g) => (Some(&mut g.ln2_g[..]), Some(&mut g.ln2_b[..])),
            None => (None, None),
        };
        layer_norm_backward(&lc.x_mid, &lc.ln2, &lp.ln2_g, &dln2_out, dgamma, dbeta, &mut dx_mid);
    }

    // ---- attention branch ----
    // x_mid = x_in + (ctx @ wo + bo)
    let dattn_out = &dx_mid;
    let dctx = Mat::matmul_nt(dattn_out, &lp.wo);
    if let Some(g) = gl.as_deref_mut() {
        Mat::matmul_tn_acc(&mut g.wo, &lc.ctx, dattn_out);
        colsum_acc(&mut g.bo, dattn_out);
    }

    let mut dq = Mat::zeros(seq, d);
    let mut dk = Mat::zeros(seq, d);
    let mut dv = Mat::zeros(seq, d);
    let mut dp = Mat::zeros(seq, seq);
    let mut ds = Mat::zeros(seq, seq);
    for h in 0..heads {
        let probs = &lc.probs[h];
        head_dprobs(&dctx, &lc.v, h, dh, &mut dp);
        // softmax backward per row; entries beyond the allowed range carry
        // zero probability, so only the prefix participates
        for i in 0..seq {
            let hi = attn.allowed_hi(i);
            let prow = &probs.row(i)[..hi];
            let dprow = &dp.row(i)[..hi];
            let mut inner = T::zero();
            for j in 0..hi {
                inner = prow[j].mul_add(dprow[j], inner);
            }
            let dsrow = ds.row_mut(i);
            for j in 0..hi {
                dsrow[j] = prow[j] * (dprow[j] - inner);
            }
            dsrow[hi..].iter_mut().for_each(|x| *x = T::zero());
        }
        head_qkv_grads(&ds, probs, &lc.q, &lc.k, &dctx, h, dh, scale, &mut dq, &mut dk, &mut dv);
    }

    let mut dln1_out = Mat::matmul_nt(&dq, &lp.wq);
    Mat::matmul_acc(&mut dln1_out, &dk, &lp.wk.transposed());
    Mat::matmul_acc(&mut dln1_out, &dv, &lp.wv.transposed());
    if let Some(g) = gl.as_deref_mut() {
        Mat::matmul_tn_acc(&mut g.wq, &lc.ln1.out, &dq);
        colsum_acc(&mut g.bq, &dq);
        Mat::matmul_tn_acc(&mut g.wk, &lc.ln1.out, &dk);
        colsum_acc(&mut g.bk, &dk);
        Mat::matmul_tn_acc(&mut g.wv, &lc.ln1.out, &dv);
        colsum_acc(&mut g.bv, &dv);
    }

    if !need_dx_in && !train {
        return None;
    }
    // dx_in = dx_mid (residual carry) + LN1 backward; LN param grads are
    // needed even when dx_in is not.
    let mut dx_in = dx_mid;
    {
        let (dgamma, dbeta) = match gl.as_deref_mut() {
            Some(g) => (Some(&mut g.ln1_g[..]), Some(&mut g.ln1_b[..])),
            None => (None, None),
        };
        layer_norm_backward(x_in, &lc.ln1, &lp.ln1_g, &dln1_out, dgamma, dbeta, &mut dx_in);
    }
    if need_dx_in {
        Some(dx_in)
    } else {
        None
    }
}

/// Full backward from logit gradients plus optional per-layer hidden-state
/// gradients at image positions (the factor path).
#[allow(clippy::too_many_arguments)]
pub fn backward<T: Real>(
    params: &BackboneParams<T>,
    cfg: &BackboneConfig,
    inst: &FlowInstance,
    cache: &FwdCache<T>,
    dlogits: &Mat<T>,
    d_hidden: &[(usize, Mat<T>)],
    grads: &mut BackboneParams<T>,
    opts: &BackwardOpts,
) {
    let seq = cache.seq;
    let stop = opts.stop_layer.max(cache.first_layer);

    // head
    let d_lnf_out = Mat::matmul_nt(dlogits, &params.w_head);
    if opts.train_head {
        Mat::matmul_tn_acc(&mut grads.w_head, &cache.lnf.out, dlogits);
        colsum_acc(&mut grads.b_head, dlogits);
    }
    let mut dx = Mat::zeros(seq, cfg.width);
    {
        let (dg, db) = if opts.train_head {
            (Some(&mut grads.lnf_g[..]), Some(&mut grads.lnf_b[..]))
        } else {
            (None, None)
        };
        layer_norm_backward(
            cache.last_x_out(),
            &cache.lnf,
            &params.lnf_g,
            &d_lnf_out,
            dg,
            db,
            &mut dx,
        );
    }

    let need_embed_grads = stop == 1 && cache.first_layer == 1 && opts.train_embeddings;
    for l in (stop..=cfg.num_layers).rev() {
        // factor-path gradient enters at this block's output
        for (dl, dh_mat) in d_hidden {
            if *dl == l {
                for (r, row) in (inst.attn.image_start..inst.attn.image_start + inst.attn.image_len)
                    .enumerate()
                {
                    crate::mat::axpy(dx.row_mut(row), T::one(), dh_mat.row(r));
                }
            }
        }
        let trainable = opts.layer_trainable[l - 1];
        let need_dx_in = l > stop || (l == stop && need_embed_grads);
        let g = if trainable {
            Some(&mut grads.layers[l - 1])
        } else {
            None
        };
        let next = layer_backward(
            &params.layers[l - 1],
            cfg,
            &inst.attn,
            cache.layer_input(l),
            cache.layer(l),
            &dx,
            g,
            need_dx_in,
        );
        if let Some(n) = next {
            dx = n;
        } else if need_dx_in {
            unreachable!("layer_backward must return dx_in when requested");
        }
    }

    if need_embed_grads {
        for (p, &t) in inst.input_tokens.iter().enumerate() {
            crate::mat::axpy(grads.tok_emb.row_mut(t as usize), T::one(), dx.row(p));
            crate::mat::axpy(grads.pos_emb.row_mut(p), T::one(), dx.row(p));
        }
    }
}
