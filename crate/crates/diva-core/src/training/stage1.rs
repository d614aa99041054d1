//! Stage 1: cross-task conditioning. The backbone stays frozen; the factor
//! encoders and low-rank readouts train against the native task losses
//! computed on bias-injected logit slices, plus the orthogonality penalty
//! once the unique-residual injection turns on.
//!
//! Because the backbone is frozen and the understanding flow is a pure
//! function of the sample, its target-position logit slice and pooled mid
//! states are computed once per sample and reused every step. The generation
//! flow draws a fresh mask per step and runs a full forward.

use super::{batch_indices, mask_rng, LossReport, RunConfig, TrainState, STAGE1_TAG};
use crate::backbone::{build_gen_flow, build_und_flow, ce_mean, ce_mean_backward, forward_cached, pool_rows};
use crate::error::{Error, Result};
use crate::factorization::{encode, encode_backward, EncodeCache, FactorEncoderParams, FlowEncoders};
use crate::mat::Mat;
use crate::mi::ortho_pair;
use crate::real::Real;
use crate::synthdata::{sample_mask, PairedSample};
use crate::training::optim::{lr_at, LrSchedule};
use crate::training::readout::ReadoutParams;
use rayon::prelude::*;

/// Frozen per-sample understanding-flow trace.
#[derive(Debug, Clone)]
pub struct UndCache<T> {
    /// Text-slice logits at the target positions (n_targets x V_t).
    pub target_slice: Mat<T>,
    pub target_tokens: Vec<u32>,
    /// (layer, pooled image-state vector) over the mid range.
    pub pooled: Vec<(usize, Vec<T>)>,
}

pub fn build_und_cache<T: Real>(
    state: &TrainState<T>,
    sample: &PairedSample,
    sample_id: usize,
) -> Result<UndCache<T>> {
    let cfg = &state.run.model;
    let inst = build_und_flow(sample, sample_id, cfg)?;
    let cache = forward_cached(&state.backbone, cfg, &inst)?;
    let (t_off, t_len) = cfg.text_slice();
    let mut target_slice = Mat::zeros(inst.target_positions.len(), t_len);
    for (r, &p) in inst.target_positions.iter().enumerate() {
        target_slice
            .row_mut(r)
            .copy_from_slice(&cache.logits.row(p)[t_off..t_off + t_len]);
    }
    let pooled = cfg
        .mid_layers()
        .map(|l| {
            (
                l,
                pool_rows(
                    &cache.layer(l).x_out,
                    inst.attn.image_start,
                    inst.attn.image_len,
                ),
            )
        })
        .collect();
    Ok(UndCache {
        target_slice,
        target_tokens: inst.target_tokens,
        pooled,
    })
}

/// Mean CE over rows of a pre-sliced logit matrix with a shared bias added
/// to every row.
fn ce_rows_biased<T: Real>(slice: &Mat<T>, bias: &[T], targets: &[u32]) -> f64 {
    if slice.rows() == 0 {
        return 0.0;
    }
    let mut biased = slice.clone();
    for r in 0..biased.rows() {
        crate::mat::axpy(biased.row_mut(r), T::one(), bias);
    }
    let positions: Vec<usize> = (0..slice.rows()).collect();
    ce_mean(&biased, &positions, targets, 0, slice.cols())
}

/// d(weight * mean CE)/d(bias). The bias is shared across rows, so per-row
/// logit gradients sum into it.
fn ce_rows_biased_dbias<T: Real>(
    slice: &Mat<T>,
    bias: &[T],
    targets: &[u32],
    weight: f64,
    dbias: &mut [T],
) {
    if slice.rows() == 0 {
        return;
    }
    let mut biased = slice.clone();
    for r in 0..biased.rows() {
        crate::mat::axpy(biased.row_mut(r), T::one(), bias);
    }
    let positions: Vec<usize> = (0..slice.rows()).collect();
    let mut drows = Mat::zeros(slice.rows(), slice.cols());
    ce_mean_backward(&biased, &positions, targets, 0, slice.cols(), weight, &mut drows);
    for r in 0..drows.rows() {
        crate::mat::axpy(dbias, T::one(), drows.row(r));
    }
}

struct SampleOut<T> {
    l_und: f64,
    l_gen: f64,
    l_perp: f64,
    enc: FlowEncoders<T>,
    ro: ReadoutParams<T>,
}

type Encoded<T> = Vec<(Vec<T>, EncodeCache<T>)>;

fn encode_layers<T: Real>(
    pooled: &[(usize, Vec<T>)],
    p: &FactorEncoderParams<T>,
) -> Result<Encoded<T>> {
    pooled.iter().map(|(_, h)| encode(h, p)).collect()
}

#[allow(clippy::too_many_arguments)]
fn sample_pass<T: Real>(
    state: &TrainState<T>,
    sample: &PairedSample,
    sample_id: usize,
    und: &UndCache<T>,
    step: u64,
    slot: usize,
    unique_on: bool,
) -> Result<SampleOut<T>> {
    let cfg = &state.run.model;
    let run = &state.run;
    let n_mid = cfg.n_mid_layers();
    let batch = run.stage1.batch_size;
    let d_z = run.factor.d_z;

    // generation flow with a fresh mask
    let mut mrng = mask_rng(state.seed, STAGE1_TAG, step, slot);
    let mask = sample_mask(&run.mask, cfg.grid_side, &mut mrng)?;
    let gen_inst = build_gen_flow(sample, &mask, sample_id, cfg)?;
    let gen_cache = forward_cached(&state.backbone, cfg, &gen_inst)?;
    let (v_off, v_len) = cfg.visual_slice();
    let mut gen_slice = Mat::zeros(gen_inst.target_positions.len(), v_len);
    for (r, &p) in gen_inst.target_positions.iter().enumerate() {
        gen_slice
            .row_mut(r)
            .copy_from_slice(&gen_cache.logits.row(p)[v_off..v_off + v_len]);
    }
    let gen_pooled: Vec<(usize, Vec<T>)> = cfg
        .mid_layers()
        .map(|l| {
            (
                l,
                pool_rows(
                    &gen_cache.layer(l).x_out,
                    gen_inst.attn.image_start,
                    gen_inst.attn.image_len,
                ),
            )
        })
        .collect();

    // factors through the current encoders, caches kept for backward
    let z_sh_u = encode_layers(&und.pooled, &state.encoders.sh_u)?;
    let z_uni_u = encode_layers(&und.pooled, &state.encoders.uni_u)?;
    let z_sh_g = encode_layers(&gen_pooled, &state.encoders.sh_g)?;
    let z_uni_g = encode_layers(&gen_pooled, &state.encoders.uni_g)?;

    let ro = &state.readouts;
    let mut ro_grads = ro.grad_zeros();
    let mut l_und = 0.0;
    let mut l_gen = 0.0;
    let mut l_perp = 0.0;
    let mut dz_sh_u = vec![vec![T::zero(); d_z]; n_mid];
    let mut dz_uni_u = vec![vec![T::zero(); d_z]; n_mid];
    let mut dz_sh_g = vec![vec![T::zero(); d_z]; n_mid];
    let mut dz_uni_g = vec![vec![T::zero(); d_z]; n_mid];

    // each (sample, layer) term carries 1/(batch * n_mid) of the batch loss
    let w_und = run.stage1.lambda_und / (batch as f64 * n_mid as f64);
    let w_gen = run.stage1.lambda_gen / (batch as f64 * n_mid as f64);
    let lambda_perp_eff = if unique_on { run.stage1.lambda_perp } else { 0.0 };
    let w_perp = lambda_perp_eff / (batch as f64 * n_mid as f64);

    for li in 0..n_mid {
        // understanding loss on s_U + A_U z_sh^G (+ B_U z_uni^U)
        let mut bias_u = ro.a_u.bias(&z_sh_g[li].0)?;
        if unique_on {
            crate::mat::axpy(&mut bias_u, T::one(), &ro.b_u.bias(&z_uni_u[li].0)?);
        }
        l_und += ce_rows_biased(&und.target_slice, &bias_u, &und.target_tokens) / n_mid as f64;
        let mut dbias_u = vec![T::zero(); bias_u.len()];
        ce_rows_biased_dbias(&und.target_slice, &bias_u, &und.target_tokens, w_und, &mut dbias_u);
        ro.a_u.bias_backward(
            &z_sh_g[li].0,
            &dbias_u,
            Some(&mut ro_grads.a_u),
            Some(&mut dz_sh_g[li]),
        );
        if unique_on {
            ro.b_u.bias_backward(
                &z_uni_u[li].0,
                &dbias_u,
                Some(&mut ro_grads.b_u),
                Some(&mut dz_uni_u[li]),
            );
        }

        // generation loss on s_G + A_G z_sh^U (+ B_G z_uni^G)
        let mut bias_g = ro.a_g.bias(&z_sh_u[li].0)?;
        if unique_on {
            crate::mat::axpy(&mut bias_g, T::one(), &ro.b_g.bias(&z_uni_g[li].0)?);
        }
        l_gen += ce_rows_biased(&gen_slice, &bias_g, &gen_inst.target_tokens) / n_mid as f64;
        let mut dbias_g = vec![T::zero(); bias_g.len()];
        ce_rows_biased_dbias(&gen_slice, &bias_g, &gen_inst.target_tokens, w_gen, &mut dbias_g);
        ro.a_g.bias_backward(
            &z_sh_u[li].0,
            &dbias_g,
            Some(&mut ro_grads.a_g),
            Some(&mut dz_sh_u[li]),
        );
        if unique_on {
            ro.b_g.bias_backward(
                &z_uni_g[li].0,
                &dbias_g,
                Some(&mut ro_grads.b_g),
                Some(&mut dz_uni_g[li]),
            );
        }

        // orthogonality between each flow's shared and unique factors; the
        // value is always reported, gradients flow only once unique encoders
        // are live (keeping their warmup gradients exactly zero)
        if unique_on {
            l_perp += (ortho_pair(
                &z_sh_u[li].0,
                &z_uni_u[li].0,
                w_perp,
                Some(&mut dz_sh_u[li]),
                Some(&mut dz_uni_u[li]),
            )? + ortho_pair(
                &z_sh_g[li].0,
                &z_uni_g[li].0,
                w_perp,
                Some(&mut dz_sh_g[li]),
                Some(&mut dz_uni_g[li]),
            )?) / n_mid as f64;
        } else {
            l_perp += (ortho_pair(&z_sh_u[li].0, &z_uni_u[li].0, 0.0, None, None)?
                + ortho_pair(&z_sh_g[li].0, &z_uni_g[li].0, 0.0, None, None)?)
                / n_mid as f64;
        }
    }

    // through the encoders; the backbone is frozen, so pooled-state
    // gradients stop here
    let mut enc_grads = state.encoders.grad_zeros();
    for li in 0..n_mid {
        encode_backward(
            &und.pooled[li].1,
            &state.encoders.sh_u,
            &z_sh_u[li].1,
            &dz_sh_u[li],
            Some(&mut enc_grads.sh_u),
            None,
        );
        encode_backward(
            &gen_pooled[li].1,
            &state.encoders.sh_g,
            &z_sh_g[li].1,
            &dz_sh_g[li],
            Some(&mut enc_grads.sh_g),
            None,
        );
        if unique_on {
            encode_backward(
                &und.pooled[li].1,
                &state.encoders.uni_u,
                &z_uni_u[li].1,
                &dz_uni_u[li],
                Some(&mut enc_grads.uni_u),
                None,
            );
            encode_backward(
                &gen_pooled[li].1,
                &state.encoders.uni_g,
                &z_uni_g[li].1,
                &dz_uni_g[li],
                Some(&mut enc_grads.uni_g),
                None,
            );
        }
    }

    Ok(SampleOut {
        l_und,
        l_gen,
        l_perp,
        enc: enc_grads,
        ro: ro_grads,
    })
}

/// One optimizer update over encoders + readouts for an explicit batch.
pub fn stage1_step<T: Real>(
    state: &mut TrainState<T>,
    batch: &[(usize, &PairedSample)],
    caches: &[&UndCache<T>],
    step: u64,
) -> Result<LossReport> {
    let run = state.run.clone();
    let unique_on = step >= run.stage1.warm_steps();

    let outs: Vec<Result<SampleOut<T>>> = batch
        .par_iter()
        .enumerate()
        .map(|(slot, (sid, sample))| {
            sample_pass(state, sample, *sid, caches[slot], step, slot, unique_on)
        })
        .collect();

    let mut l_und = 0.0;
    let mut l_gen = 0.0;
    let mut l_perp = 0.0;
    let mut enc_grads = state.encoders.grad_zeros();
    let mut ro_grads = state.readouts.grad_zeros();
    let b = batch.len() as f64;
    for out in outs {
        let s = out?;
        l_und += s.l_und / b;
        l_gen += s.l_gen / b;
        l_perp += s.l_perp / b;
        enc_grads.add_assign(&s.enc);
        ro_grads.add_assign(&s.ro);
    }

    let lambda_perp_eff = if unique_on { run.stage1.lambda_perp } else { 0.0 };
    let sched = LrSchedule {
        warmup: run.stage1.optim.warmup_steps,
        total: run.stage1.steps,
        peak: run.stage1.optim.peak_lr,
        floor: run.stage1.optim.floor_lr,
    };
    let lr = lr_at(step, &sched);

    // one update over encoders + readouts
    {
        let enc_leaves = enc_grads.leaves();
        let ro_leaves = ro_grads.leaves();
        let grads: Vec<(&str, &[T])> = enc_leaves
            .iter()
            .map(|(n, s)| (n.as_str(), *s))
            .chain(ro_leaves.iter().map(|(n, s)| (n.as_str(), *s)))
            .collect();
        let mut enc_params = state.encoders.leaves_mut();
        let mut ro_params = state.readouts.leaves_mut();
        let mut params: Vec<(&str, &mut [T])> = enc_params
            .iter_mut()
            .map(|(n, s)| (n.as_str(), &mut **s))
            .chain(ro_params.iter_mut().map(|(n, s)| (n.as_str(), &mut **s)))
            .collect();
        // the unique-path machinery stays untouched until the warmup ends
        let active = |name: &str| {
            unique_on
                || !(name.starts_with("enc.uni_")
                    || name.starts_with("readout.b_u")
                    || name.starts_with("readout.b_g"))
        };
        state.opt_enc.step_masked(&mut params, &grads, lr, &active);
    }

    let total =
        run.stage1.lambda_und * l_und + run.stage1.lambda_gen * l_gen + lambda_perp_eff * l_perp;
    let report = LossReport {
        step,
        stage: "stage1".into(),
        l_und,
        l_gen,
        l_perp,
        l_u2g: 0.0,
        l_g2u: 0.0,
        l_uni_estimate: 0.0,
        total,
        lambda_und: run.stage1.lambda_und,
        lambda_gen: run.stage1.lambda_gen,
        lambda_perp: lambda_perp_eff,
        lambda_sha: 0.0,
        lambda_uni: 0.0,
        lr,
    };
    report.check_bookkeeping()?;
    Ok(report)
}

/// Full Stage-1 loop from a fresh state.
pub fn run_stage1<T: Real>(
    run: &RunConfig,
    dataset: &[PairedSample],
    seed: u64,
    mut on_report: impl FnMut(&LossReport),
) -> Result<TrainState<T>> {
    if dataset.is_empty() {
        return Err(Error::Argument("stage 1 needs a non-empty dataset".into()));
    }
    let mut state = TrainState::init(run, seed)?;
    state.stage = "stage1".into();
    let digest_before = state.backbone_digest();

    // frozen understanding-flow traces, one per sample
    let caches: Vec<UndCache<T>> = dataset
        .par_iter()
        .enumerate()
        .map(|(i, s)| build_und_cache(&state, s, i))
        .collect::<Result<Vec<_>>>()?;

    for step in state.step..run.stage1.steps {
        let ids = batch_indices(seed, STAGE1_TAG, step, dataset.len(), run.stage1.batch_size);
        let batch: Vec<(usize, &PairedSample)> = ids.iter().map(|&i| (i, &dataset[i])).collect();
        let batch_caches: Vec<&UndCache<T>> = ids.iter().map(|&i| &caches[i]).collect();
        let report = stage1_step(&mut state, &batch, &batch_caches, step)?;
        state.step = step + 1;
        if step % run.stage1.log_interval == 0 || step + 1 == run.stage1.steps {
            on_report(&report);
        }
        if !report.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite stage-1 loss at step {step}"
            )));
        }
    }

    if state.backbone_digest() != digest_before {
        return Err(Error::Invariant(
            "stage 1 modified frozen backbone parameters".into(),
        ));
    }
    Ok(state)
}
