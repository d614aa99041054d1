//! Forward pass with full activation caching (for backprop) and partial-depth
//! variants used by the trainer: resuming from a cached frozen prefix, and
//! running only the mid-layer band for EMA target factors.

use super::{AttentionSpec, BackboneConfig, BackboneParams, FlowInstance, ForwardTrace};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::real::Real;

pub const LN_EPS: f64 = 1e-5;

#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    // tanh approximation
    let c = T::of(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = T::of(0.044715);
    let u = c * (x + k * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(0.797_884_560_802_865_4);
    let k = T::of(0.044715);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * sech2 * c * (T::one() + T::of(3.0) * k * x * x)
}

#[derive(Debug, Clone)]
pub struct LnCache<T> {
    pub out: Mat<T>,
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Row-wise layer norm with learned affine.
pub fn layer_norm<T: Real>(x: &Mat<T>, gamma: &[T], beta: &[T]) -> LnCache<T> {
    let (rows, cols) = (x.rows(), x.cols());
    let mut out = Mat::zeros(rows, cols);
    let mut mean = vec![T::zero(); rows];
    let mut rstd = vec![T::zero(); rows];
    let inv_n = T::of(1.0 / cols as f64);
    for r in 0..rows {
        let xr = x.row(r);
        let mut m = T::zero();
        for &v in xr {
            m += v;
        }
        m *= inv_n;
        let mut var = T::zero();
        for &v in xr {
            let c = v - m;
            var += c * c;
        }
        var *= inv_n;
        let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
        let or = out.row_mut(r);
        for i in 0..cols {
            or[i] = gamma[i] * ((xr[i] - m) * rs) + beta[i];
        }
        mean[r] = m;
        rstd[r] = rs;
    }
    LnCache { out, mean, rstd }
}

/// Backward through layer norm; accumulates dgamma/dbeta and dx.
pub fn layer_norm_backward<T: Real>(
    x: &Mat<T>,
    ln: &LnCache<T>,
    gamma: &[T],
    dout: &Mat<T>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
    dx: &mut Mat<T>,
) {
    let (rows, cols) = (x.rows(), x.cols());
    let inv_n = T::of(1.0 / cols as f64);
    let mut dg = vec![T::zero(); cols];
    let mut db = vec![T::zero(); cols];
    for r in 0..rows {
        let xr = x.row(r);
        let dor = dout.row(r);
        let (m, rs) = (ln.mean[r], ln.rstd[r]);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for i in 0..cols {
            let xhat = (xr[i] - m) * rs;
            let dxhat = dor[i] * gamma[i];
            dg[i] += dor[i] * xhat;
            db[i] += dor[i];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        sum_dxhat *= inv_n;
        sum_dxhat_xhat *= inv_n;
        let dxr = dx.row_mut(r);
        for i in 0..cols {
            let xhat = (xr[i] - m) * rs;
            let dxhat = dor[i] * gamma[i];
            dxr[i] += rs * (dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
        }
    }
    if let Some(dgamma) = dgamma {
        for i in 0..cols {
            dgamma[i] += dg[i];
        }
    }
    if let Some(dbeta) = dbeta {
        for i in 0..cols {
            dbeta[i] += db[i];
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerCache<T> {
    pub ln1: LnCache<T>,
    pub q: Mat<T>,
    pub k: Mat<T>,
    pub v: Mat<T>,
    /// Per-head attention probabilities, zeros at disallowed pairs.
    pub probs: Vec<Mat<T>>,
    /// Concatenated head outputs before the output projection.
    pub ctx: Mat<T>,
    pub x_mid: Mat<T>,
    pub ln2: LnCache<T>,
    pub ff_pre: Mat<T>,
    pub ff_act: Mat<T>,
    pub x_out: Mat<T>,
}

#[derive(Debug)]
pub struct FwdCache<T> {
    pub seq: usize,
    pub pad: Vec<bool>,
    /// Input activations of the first computed layer (embeddings when
    /// `first_layer == 1`, a cached prefix otherwise).
    pub x0: Mat<T>,
    pub first_layer: usize,
    pub layers: Vec<LayerCache<T>>,
    pub lnf: LnCache<T>,
    pub logits: Mat<T>,
}

impl<T: Real> FwdCache<T> {
    /// Block input of layer l (1-based, l >= first_layer).
    pub fn layer_input(&self, l: usize) -> &Mat<T> {
        if l == self.first_layer {
            &self.x0
        } else {
            &self.layers[l - 1 - self.first_layer].x_out
        }
    }

    pub fn layer(&self, l: usize) -> &LayerCache<T> {
        &self.layers[l - self.first_layer]
    }

    pub fn last_x_out(&self) -> &Mat<T> {
        &self.layers.last().unwrap().x_out
    }

    /// Public trace view: full logits plus per-layer hidden states at image
    /// positions. Only valid for full-depth caches.
    pub fn trace(&self, inst: &FlowInstance, num_layers: usize) -> ForwardTrace<T> {
        assert_eq!(self.first_layer, 1, "trace requires a full-depth forward");
        assert_eq!(self.layers.len(), num_layers);
        let hidden = self
            .layers
            .iter()
            .map(|lc| extract_rows(&lc.x_out, inst.attn.image_start, inst.attn.image_len))
            .collect();
        ForwardTrace {
            logits: self.logits.clone(),
            hidden,
        }
    }
}

pub fn extract_rows<T: Real>(m: &Mat<T>, start: usize, len: usize) -> Mat<T> {
    let mut out = Mat::zeros(len, m.cols());
    for r in 0..len {
        out.row_mut(r).copy_from_slice(m.row(start + r));
    }
    out
}

pub fn validate_instance(cfg: &BackboneConfig, inst: &FlowInstance) -> Result<()> {
    let vt = cfg.vocab_total() as u32;
    for (i, &t) in inst.input_tokens.iter().enumerate() {
        if t >= vt {
            return Err(Error::Input(format!(
                "token {t} out of range [0, {vt}) at position {i}"
            )));
        }
    }
    if inst.seq_len() > cfg.max_seq() {
        return Err(Error::Input(format!(
            "sequence length {} exceeds configured max {}",
            inst.seq_len(),
            cfg.max_seq()
        )));
    }
    if inst.seq_len() == 0 {
        return Err(Error::Input("empty input sequence".into()));
    }
    for &p in &inst.target_positions {
        if p >= inst.seq_len() {
            return Err(Error::Input(format!(
                "target position {p} outside sequence of length {}",
                inst.seq_len()
            )));
        }
    }
    Ok(())
}

fn embed<T: Real>(params: &BackboneParams<T>, inst: &FlowInstance) -> Mat<T> {
    let seq = inst.seq_len();
    let d = params.tok_emb.cols();
    let mut x = Mat::zeros(seq, d);
    for (p, &t) in inst.input_tokens.iter().enumerate() {
        let xr = x.row_mut(p);
        let te = params.tok_emb.row(t as usize);
        let pe = params.pos_emb.row(p);
        for i in 0..d {
            xr[i] = te[i] + pe[i];
        }
    }
    x
}

/// One strided gemm over a head's column panel.
/// c(seq x seq, full) += or = Q_h @ K_h^T / sqrt(dh)
#[allow(clippy::too_many_arguments)]
fn head_scores<T: Real>(
    q: &Mat<T>,
    k: &Mat<T>,
    head: usize,
    dh: usize,
    scale: T,
    scores: &mut Mat<T>,
) {
    let seq = q.rows();
    let d = q.cols();
    unsafe {
        T::gemm(
            seq,
            dh,
            seq,
            scale,
            q.as_slice().as_ptr().add(head * dh),
            d as isize,
            1,
            k.as_slice().as_ptr().add(head * dh),
            1,
            d as isize,
            T::zero(),
            scores.as_mut_slice().as_mut_ptr(),
            seq as isize,
            1,
        );
    }
}

/// ctx_h = probs @ V_h written into the head panel of ctx.
fn head_ctx<T: Real>(probs: &Mat<T>, v: &Mat<T>, head: usize, dh: usize, ctx: &mut Mat<T>) {
    let seq = probs.rows();
    let d = v.cols();
    unsafe {
        T::gemm(
            seq,
            seq,
            dh,
            T::one(),
            probs.as_slice().as_ptr(),
            seq as isize,
            1,
            v.as_slice().as_ptr().add(head * dh),
            d as isize,
            1,
            T::zero(),
            ctx.as_mut_slice().as_mut_ptr().add(head * dh),
            d as isize,
            1,
        );
    }
}

fn layer_forward<T: Real>(
    lp: &super::LayerParams<T>,
    cfg: &BackboneConfig,
    attn: &AttentionSpec,
    pad: &[bool],
    x_in: &Mat<T>,
) -> LayerCache<T> {
    let seq = x_in.rows();
    let d = cfg.width;
    let heads = cfg.heads;
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());

    let ln1 = layer_norm(x_in, &lp.ln1_g, &lp.ln1_b);
    let mut q = Mat::matmul(&ln1.out, &lp.wq);
    let mut k = Mat::matmul(&ln1.out, &lp.wk);
    let mut v = Mat::matmul(&ln1.out, &lp.wv);
    for r in 0..seq {
        crate::mat::axpy(q.row_mut(r), T::one(), &lp.bq);
        crate::mat::axpy(k.row_mut(r), T::one(), &lp.bk);
        crate::mat::axpy(v.row_mut(r), T::one(), &lp.bv);
    }

    let mut ctx = Mat::zeros(seq, d);
    let mut probs = Vec::with_capacity(heads);
    let mut scores = Mat::zeros(seq, seq);
    let any_pad = pad.iter().any(|&p| p);
    for h in 0..heads {
        head_scores(&q, &k, h, dh, scale, &mut scores);
        // masked softmax rows; the allowed keys form a contiguous range,
        // minus PAD positions when present
        let mut p = Mat::zeros(seq, seq);
        for i in 0..seq {
            let hi = attn.allowed_hi(i);
            let srow = &scores.row(i)[..hi];
            let mut m = T::of(f64::NEG_INFINITY);
            if any_pad {
                for (j, &s) in srow.iter().enumerate() {
                    if !pad[j] && s > m {
                        m = s;
                    }
                }
            } else {
                for &s in srow {
                    if s > m {
                        m = s;
                    }
                }
            }
            if !m.is_finite() {
                continue; // row attends to nothing (whole prefix is PAD)
            }
            let prow = &mut p.row_mut(i)[..hi];
            let mut sum = T::zero();
            if any_pad {
                for (j, x) in prow.iter_mut().enumerate() {
                    if !pad[j] {
                        let e = (srow[j] - m).exp();
                        *x = e;
                        sum += e;
                    }
                }
            } else {
                for (x, &s) in prow.iter_mut().zip(srow.iter()) {
                    let e = (s - m).exp();
                    *x = e;
                    sum += e;
                }
            }
            let inv = T::one() / sum;
            prow.iter_mut().for_each(|x| *x *= inv);
        }
        head_ctx(&p, &v, h, dh, &mut ctx);
        probs.push(p);
    }

    let mut attn_out = Mat::matmul(&ctx, &lp.wo);
    for r in 0..seq {
        crate::mat::axpy(attn_out.row_mut(r), T::one(), &lp.bo);
    }
    let mut x_mid = x_in.clone();
    x_mid.add_scaled(&attn_out, T::one());

    let ln2 = layer_norm(&x_mid, &lp.ln2_g, &lp.ln2_b);
    let mut ff_pre = Mat::matmul(&ln2.out, &lp.w1);
    for r in 0..seq {
        crate::mat::axpy(ff_pre.row_mut(r), T::one(), &lp.b1);
    }
    let mut ff_act = Mat::zeros(seq, cfg.ff_width);
    for (o, &i) in ff_act
        .as_mut_slice()
        .iter_mut()
        .zip(ff_pre.as_slice().iter())
    {
        *o = gelu(i);
    }
    let mut ff_out = Mat::matmul(&ff_act, &lp.w2);
    for r in 0..seq {
        crate::mat::axpy(ff_out.row_mut(r), T::one(), &lp.b2);
    }
    let mut x_out = x_mid.clone();
    x_out.add_scaled(&ff_out, T::one());

    LayerCache {
        ln1,
        q,
        k,
        v,
        probs,
        ctx,
        x_mid,
        ln2,
        ff_pre,
        ff_act,
        x_out,
    }
}

fn run_to_logits<T: Real>(
    params: &BackboneParams<T>,
    cfg: &BackboneConfig,
    inst: &FlowInstance,
    x0: Mat<T>,
    first_layer: usize,
) -> FwdCache<T> {
    let pad = inst.pad_mask(cfg.pad());
    let seq = x0.rows();
    let mut layers = Vec::with_capacity(cfg.num_layers - first_layer + 1);
    {
        let mut x = &x0;
        for l in first_layer..=cfg.num_layers {
            let lc = layer_forward(&params.layers[l - 1], cfg, &inst.attn, &pad, x);
            layers.push(lc);
            x = &layers.last().unwrap().x_out;
        }
    }
    let lnf = layer_norm(&layers.last().unwrap().x_out, &params.lnf_g, &params.lnf_b);
    let mut logits = Mat::matmul(&lnf.out, &params.w_head);
    for r in 0..seq {
        crate::mat::axpy(logits.row_mut(r), T::one(), &params.b_head);
    }
    // no prediction at PAD positions
    for (r, &is_pad) in pad.iter().enumerate() {
        if is_pad {
            logits.row_mut(r).iter_mut().for_each(|x| *x = T::zero());
        }
    }
    FwdCache {
        seq,
        pad,
        x0,
        first_layer,
        layers,
        lnf,
        logits,
    }
}

/// Full forward with activation cache.
pub fn forward_cached<T: Real>(
    params: &BackboneParams<T>,
    cfg: &BackboneConfig,
    inst: &FlowInstance,
) -> Result<FwdCache<T>> {
    validate_instance(cfg, inst)?;
    let x0 = embed(params, inst);
    Ok(run_to_logits(params, cfg, inst, x0, 1))
}

/// Forward resuming from cached activations that feed layer `first_layer`.
pub fn forward_from_layer<T: Real>(
    params: &BackboneParams<T>,
    cfg: &BackboneConfig,
    inst: &FlowInstance,
    x_in: Mat<T>,
    first_layer: usize,
) -> Result<FwdCache<T>> {
    validate_instance(cfg, inst)?;
    if first_layer < 1 || first_layer > cfg.num_layers {
        return Err(Error::Argument(format!(
            "first_layer {first_layer} outside [1, {}]",
            cfg.num_layers
        )));
    }
    if x_in.rows() != inst.seq_len() {
        return Err(Error::Argument(
            "cached activations do not match sequence length".into(),
        ));
    }
    Ok(run_to_logits(params, cfg, inst, x_in, first_layer))
}

/// Public forward: deterministic trace of logits + per-layer image hidden
/// states.
pub fn forward<T: Real>(
    params: &BackboneParams<T>,
    cfg: &BackboneConfig,
    inst: &FlowInstance,
) -> Result<ForwardTrace<T>> {
    let cache = forward_cached(params, cfg, inst)?;
    Ok(cache.trace(inst, cfg.num_layers))
}

/// Run only layers `from..=to` starting from `x_in` and return, per layer,
/// the mean-pooled hidden vector over image positions. Used for EMA target
/// factors; no gradients flow through this path.
pub fn mid_pooled_states<T: Real>(
    params: &BackboneParams<T>,
    cfg: &BackboneConfig,
    inst: &FlowInstance,
    x_in: &Mat<T>,
    from: usize,
    to: usize,
) -> Vec<(usize, Vec<T>)> {
    let pad = inst.pad_mask(cfg.pad());
    let mut out = Vec::with_capacity(to - from + 1);
    let mut x = x_in.clone();
    for l in from..=to {
        let lc = layer_forward(&params.layers[l - 1], cfg, &inst.attn, &pad, &x);
        x = lc.x_out;
        out.push((l, pool_rows(&x, inst.attn.image_start, inst.attn.image_len)));
    }
    out
}

/// Embed and run layers 1..=depth only, returning the activations that feed
/// layer depth+1. Used to cache the frozen prefix of deterministic flows.
pub fn forward_prefix<T: Real>(
    params: &BackboneParams<T>,
    cfg: &BackboneConfig,
    inst: &FlowInstance,
    depth: usize,
) -> Result<Mat<T>> {
    validate_instance(cfg, inst)?;
    if depth >= cfg.num_layers {
        return Err(Error::Argument(format!(
            "prefix depth {depth} must stay below num_layers {}",
            cfg.num_layers
        )));
    }
    let pad = inst.pad_mask(cfg.pad());
    let mut x = embed(params, inst);
    for l in 1..=depth {
        let lc = layer_forward(&params.layers[l - 1], cfg, &inst.attn, &pad, &x);
        x = lc.x_out;
    }
    Ok(x)
}

/// Arithmetic mean over a row range.
pub fn pool_rows<T: Real>(m: &Mat<T>, start: usize, len: usize) -> Vec<T> {
    let mut v = vec![T::zero(); m.cols()];
    for r in start..start + len {
        crate::mat::axpy(&mut v, T::one(), m.row(r));
    }
    let inv = T::of(1.0 / len as f64);
    v.iter_mut().for_each(|x| *x *= inv);
    v
}
