//! Stage 2: backbone refinement with the mutual-information objectives. The
//! factor encoders are frozen; the configured mid-layer band of the backbone
//! (and optionally the output head) trains against
//!   L = L_und + L_gen + lambda_sha(t) * (L_{U->G} + L_{G->U})
//!       + lambda_uni(t) * CLUB
//! with EMA-target stop-gradient alignment and a bilinear unique critic that
//! ascends its own InfoNCE before each CLUB evaluation.
//!
//! The SFT baseline is the identical loop with every extra term off and no
//! encoder/critic/EMA machinery, run at the matched total step budget.

use super::{
    batch_indices, mask_rng, trainable_backbone_leaves, LossReport, RunConfig, TrainState,
    SFT_TAG, STAGE2_TAG,
};
use crate::backbone::{
    backward, build_gen_flow, build_und_flow, ce_mean, ce_mean_backward, forward_cached,
    forward_from_layer, forward_prefix, mid_pooled_states, pool_rows, BackboneParams,
    BackwardOpts, FlowInstance, FwdCache,
};
use crate::error::{Error, Result};
use crate::factorization::{encode, encode_backward, EncodeCache, FactorEncoderParams};
use crate::mat::Mat;
use crate::mi::{
    infonce_with_grads, nce_club, nce_club_with_grads, ortho_pair, Critic, FactorBatch,
};
use crate::real::Real;
use crate::synthdata::{sample_mask, PairedSample};
use crate::training::optim::{ema_decay_at, ema_update, lr_at, LrSchedule};
use rayon::prelude::*;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoopMode {
    Stage2,
    Sft,
}

/// Cached activations feeding the first non-frozen layer of the
/// understanding flow (which is a pure function of the sample while the
/// layers below the trainable band stay frozen).
pub struct PrefixCache<T> {
    pub depth: usize,
    map: HashMap<usize, Mat<T>>,
}

impl<T: Real> PrefixCache<T> {
    pub fn new(depth: usize) -> Self {
        PrefixCache {
            depth,
            map: HashMap::new(),
        }
    }

    pub fn prefill(
        &mut self,
        state: &TrainState<T>,
        ids: &[usize],
        dataset: &[PairedSample],
    ) -> Result<()> {
        if self.depth == 0 {
            return Ok(());
        }
        let missing: Vec<usize> = ids.iter().copied().filter(|i| !self.map.contains_key(i)).collect();
        let built: Vec<(usize, Result<Mat<T>>)> = missing
            .par_iter()
            .map(|&i| {
                let inst = match build_und_flow(&dataset[i], i, &state.run.model) {
                    Ok(inst) => inst,
                    Err(e) => return (i, Err(e)),
                };
                (
                    i,
                    forward_prefix(&state.backbone, &state.run.model, &inst, self.depth),
                )
            })
            .collect();
        for (i, r) in built {
            self.map.insert(i, r?);
        }
        Ok(())
    }

    pub fn get(&self, id: usize) -> Option<&Mat<T>> {
        if self.depth == 0 {
            None
        } else {
            self.map.get(&id)
        }
    }
}

struct FlowPack<T> {
    inst: FlowInstance,
    cache: FwdCache<T>,
    ce: f64,
    /// Live pooled mid-layer states, factor encodings with caches, and
    /// (optionally) EMA-target shared factors. Empty in SFT mode.
    pooled: Vec<Vec<T>>,
    z_sh: Vec<(Vec<T>, EncodeCache<T>)>,
    z_uni: Vec<(Vec<T>, EncodeCache<T>)>,
    z_sh_tgt: Vec<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
fn flow_pack<T: Real>(
    state: &TrainState<T>,
    ema_bb: Option<&BackboneParams<T>>,
    inst: FlowInstance,
    prefix: Option<&Mat<T>>,
    prefix_depth: usize,
    t_start: usize,
    enc_sh: &FactorEncoderParams<T>,
    enc_uni: &FactorEncoderParams<T>,
    mode: LoopMode,
) -> Result<FlowPack<T>> {
    let cfg = &state.run.model;
    let cache = match prefix {
        Some(px) => forward_from_layer(&state.backbone, cfg, &inst, px.clone(), prefix_depth + 1)?,
        None => forward_cached(&state.backbone, cfg, &inst)?,
    };
    let (off, len) = match inst.flow_kind {
        crate::backbone::FlowKind::Understanding => cfg.text_slice(),
        crate::backbone::FlowKind::Generation => cfg.visual_slice(),
    };
    let ce = ce_mean(&cache.logits, &inst.target_positions, &inst.target_tokens, off, len);

    if mode == LoopMode::Sft {
        return Ok(FlowPack {
            inst,
            cache,
            ce,
            pooled: Vec::new(),
            z_sh: Vec::new(),
            z_uni: Vec::new(),
            z_sh_tgt: Vec::new(),
        });
    }

    let mids: Vec<usize> = cfg.mid_layers().collect();
    let pooled: Vec<Vec<T>> = mids
        .iter()
        .map(|&l| pool_rows(&cache.layer(l).x_out, inst.attn.image_start, inst.attn.image_len))
        .collect();
    let z_sh: Vec<(Vec<T>, EncodeCache<T>)> =
        pooled.iter().map(|h| encode(h, enc_sh)).collect::<Result<_>>()?;
    let z_uni: Vec<(Vec<T>, EncodeCache<T>)> =
        pooled.iter().map(|h| encode(h, enc_uni)).collect::<Result<_>>()?;

    // EMA-target factors: layers below the trainable band are identical to
    // the live ones; layers inside it re-run under the shadow parameters.
    let z_sh_tgt = if let Some(ema) = ema_bb {
        let ema_pooled: HashMap<usize, Vec<T>> = if cfg.mid_end >= t_start {
            mid_pooled_states(
                ema,
                cfg,
                &inst,
                cache.layer_input(t_start),
                t_start,
                cfg.mid_end,
            )
            .into_iter()
            .collect()
        } else {
            HashMap::new()
        };
        mids.iter()
            .enumerate()
            .map(|(li, &l)| {
                let h = ema_pooled.get(&l).unwrap_or(&pooled[li]);
                Ok(encode(h, enc_sh)?.0)
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    Ok(FlowPack {
        inst,
        cache,
        ce,
        pooled,
        z_sh,
        z_uni,
        z_sh_tgt,
    })
}

fn factor_batch<T: Real>(
    packs: &[FlowPack<T>],
    li: usize,
    shared: bool,
    ids: &[usize],
) -> Result<FactorBatch<T>> {
    let d_z = if shared {
        packs[0].z_sh[li].0.len()
    } else {
        packs[0].z_uni[li].0.len()
    };
    let mut z = Mat::zeros(packs.len(), d_z);
    for (r, p) in packs.iter().enumerate() {
        let v = if shared { &p.z_sh[li].0 } else { &p.z_uni[li].0 };
        z.row_mut(r).copy_from_slice(v);
    }
    FactorBatch::new(z, ids.to_vec())
}

fn target_batch<T: Real>(packs: &[FlowPack<T>], li: usize, ids: &[usize]) -> Result<FactorBatch<T>> {
    let d_z = packs[0].z_sh_tgt[li].len();
    let mut z = Mat::zeros(packs.len(), d_z);
    for (r, p) in packs.iter().enumerate() {
        z.row_mut(r).copy_from_slice(&p.z_sh_tgt[li]);
    }
    FactorBatch::new(z, ids.to_vec())
}

/// One backbone update step shared by stage 2 and the SFT baseline.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Real>(
    state: &mut TrainState<T>,
    batch: &[(usize, &PairedSample)],
    prefix: &PrefixCache<T>,
    step: u64,
    total_steps: u64,
    mode: LoopMode,
) -> Result<LossReport> {
    let run = state.run.clone();
    let cfg = &run.model;
    let cfg2 = &run.stage2;
    let n_mid = cfg.n_mid_layers();
    let b = batch.len();
    let ids: Vec<usize> = batch.iter().map(|(i, _)| *i).collect();
    let (t_lo, t_hi) = cfg2.trainable_range(cfg);
    let stage_tag = match mode {
        LoopMode::Stage2 => STAGE2_TAG,
        LoopMode::Sft => SFT_TAG,
    };

    let lambda_sha = if mode == LoopMode::Stage2 {
        cfg2.lambda_at(step, cfg2.lambda_sha_max)
    } else {
        0.0
    };
    let lambda_uni = if mode == LoopMode::Stage2 && cfg2.use_uni {
        cfg2.lambda_at(step, cfg2.lambda_uni_max)
    } else {
        0.0
    };

    let ema_bb = if mode == LoopMode::Stage2 && cfg2.use_sg {
        Some(state.ema_backbone())
    } else {
        None
    };

    // ---- forwards, factors, targets (parallel over samples) ----
    let pack_pairs: Vec<Result<(FlowPack<T>, FlowPack<T>)>> = batch
        .par_iter()
        .enumerate()
        .map(|(slot, (sid, sample))| {
            let und_inst = build_und_flow(sample, *sid, cfg)?;
            let u = flow_pack(
                state,
                ema_bb.as_ref(),
                und_inst,
                prefix.get(*sid),
                prefix.depth,
                t_lo,
                &state.encoders.sh_u,
                &state.encoders.uni_u,
                mode,
            )?;
            let mut mrng = mask_rng(state.seed, stage_tag, step, slot);
            let mask = sample_mask(&run.mask, cfg.grid_side, &mut mrng)?;
            let gen_inst = build_gen_flow(sample, &mask, *sid, cfg)?;
            let g = flow_pack(
                state,
                ema_bb.as_ref(),
                gen_inst,
                None,
                0,
                t_lo,
                &state.encoders.sh_g,
                &state.encoders.uni_g,
                mode,
            )?;
            Ok((u, g))
        })
        .collect();
    let mut packs_u = Vec::with_capacity(b);
    let mut packs_g = Vec::with_capacity(b);
    for p in pack_pairs {
        let (u, g) = p?;
        packs_u.push(u);
        packs_g.push(g);
    }

    let l_und = packs_u.iter().map(|p| p.ce).sum::<f64>() / b as f64;
    let l_gen = packs_g.iter().map(|p| p.ce).sum::<f64>() / b as f64;

    // ---- contrastive objectives and factor cotangents ----
    let mut l_u2g = 0.0;
    let mut l_g2u = 0.0;
    let mut l_uni = 0.0;
    let mut l_perp = 0.0;
    let d_z = run.factor.d_z;
    let mut dz_sh_u = vec![vec![vec![T::zero(); d_z]; n_mid]; b];
    let mut dz_sh_g = vec![vec![vec![T::zero(); d_z]; n_mid]; b];
    let mut dz_uni_u = vec![vec![vec![T::zero(); d_z]; n_mid]; b];
    let mut dz_uni_g = vec![vec![vec![T::zero(); d_z]; n_mid]; b];

    if mode == LoopMode::Stage2 {
        let cos = Critic::<T>::cosine(cfg2.tau);

        // unique critic ascends its own InfoNCE on detached uniques before
        // the CLUB value feeds the representation gradient
        for _ in 0..cfg2.critic_steps.max(1) {
            let mut dm = Mat::zeros(d_z, d_z);
            for li in 0..n_mid {
                let zu_u = factor_batch(&packs_u, li, false, &ids)?;
                let zu_g = factor_batch(&packs_g, li, false, &ids)?;
                let (_, g) = infonce_with_grads(
                    &zu_u,
                    &zu_g,
                    &state.uni_critic,
                    false,
                    false,
                    true,
                    1.0 / n_mid as f64,
                )?;
                dm.add_scaled(g.d_proj.as_ref().unwrap(), T::one());
            }
            let proj = state.uni_critic.proj.as_mut().unwrap();
            let mut params: Vec<(&str, &mut [T])> = vec![("critic.proj", proj.as_mut_slice())];
            let grads: Vec<(&str, &[T])> = vec![("critic.proj", dm.as_slice())];
            state.opt_critic.step(&mut params, &grads, cfg2.critic_lr);
        }

        for li in 0..n_mid {
            let zs_u = factor_batch(&packs_u, li, true, &ids)?;
            let zs_g = factor_batch(&packs_g, li, true, &ids)?;
            let zu_u = factor_batch(&packs_u, li, false, &ids)?;
            let zu_g = factor_batch(&packs_g, li, false, &ids)?;

            // directed alignment; targets are EMA factors under stop-gradient
            // or the live counter-flow factors when sg is ablated
            if cfg2.use_sg {
                let tg = target_batch(&packs_g, li, &ids)?;
                let tu = target_batch(&packs_u, li, &ids)?;
                let (v1, g1) = infonce_with_grads(
                    &zs_u,
                    &tg,
                    &cos,
                    true,
                    false,
                    false,
                    lambda_sha / n_mid as f64,
                )?;
                l_u2g += v1.loss / n_mid as f64;
                add_rows(&mut dz_sh_u, li, g1.d_za.as_ref().unwrap());
                let (v2, g2) = infonce_with_grads(
                    &zs_g,
                    &tu,
                    &cos,
                    true,
                    false,
                    false,
                    lambda_sha / n_mid as f64,
                )?;
                l_g2u += v2.loss / n_mid as f64;
                add_rows(&mut dz_sh_g, li, g2.d_za.as_ref().unwrap());
            } else {
                let (v1, g1) = infonce_with_grads(
                    &zs_u,
                    &zs_g,
                    &cos,
                    true,
                    true,
                    false,
                    lambda_sha / n_mid as f64,
                )?;
                l_u2g += v1.loss / n_mid as f64;
                add_rows(&mut dz_sh_u, li, g1.d_za.as_ref().unwrap());
                add_rows(&mut dz_sh_g, li, g1.d_zb.as_ref().unwrap());
                let (v2, g2) = infonce_with_grads(
                    &zs_g,
                    &zs_u,
                    &cos,
                    true,
                    true,
                    false,
                    lambda_sha / n_mid as f64,
                )?;
                l_g2u += v2.loss / n_mid as f64;
                add_rows(&mut dz_sh_g, li, g2.d_za.as_ref().unwrap());
                add_rows(&mut dz_sh_u, li, g2.d_zb.as_ref().unwrap());
            }

            // CLUB with the freshly-updated critic. The representation only
            // receives gradient while the estimate is positive; driving the
            // estimate below zero is estimator gaming, not disentanglement.
            if lambda_uni > 0.0 {
                let probe = nce_club(&zu_u, &zu_g, &state.uni_critic)?;
                if probe > 0.0 {
                    let (v, g) = nce_club_with_grads(
                        &zu_u,
                        &zu_g,
                        &state.uni_critic,
                        true,
                        true,
                        lambda_uni / n_mid as f64,
                    )?;
                    l_uni += v / n_mid as f64;
                    add_rows(&mut dz_uni_u, li, g.d_za.as_ref().unwrap());
                    add_rows(&mut dz_uni_g, li, g.d_zb.as_ref().unwrap());
                } else {
                    l_uni += probe / n_mid as f64;
                }
            } else {
                l_uni += nce_club(&zu_u, &zu_g, &state.uni_critic)? / n_mid as f64;
            }

            // reported only; the orthogonality constraint belongs to stage 1
            for s in 0..b {
                l_perp += (ortho_pair(&packs_u[s].z_sh[li].0, &packs_u[s].z_uni[li].0, 0.0, None, None)?
                    + ortho_pair(&packs_g[s].z_sh[li].0, &packs_g[s].z_uni[li].0, 0.0, None, None)?)
                    / (n_mid as f64 * b as f64);
            }
        }
    }

    // ---- backward (parallel over the 2B instances) ----
    let jobs: Vec<(usize, bool)> = (0..b)
        .flat_map(|s| [(s, true), (s, false)])
        .collect();
    let grads_list: Vec<BackboneParams<T>> = jobs
        .par_iter()
        .map(|&(s, is_und)| {
            let (pack, dz_sh, dz_uni, enc_sh, enc_uni, (off, len)) = if is_und {
                (
                    &packs_u[s],
                    &dz_sh_u[s],
                    &dz_uni_u[s],
                    &state.encoders.sh_u,
                    &state.encoders.uni_u,
                    cfg.text_slice(),
                )
            } else {
                (
                    &packs_g[s],
                    &dz_sh_g[s],
                    &dz_uni_g[s],
                    &state.encoders.sh_g,
                    &state.encoders.uni_g,
                    cfg.visual_slice(),
                )
            };
            let mut dlogits = Mat::zeros(pack.cache.seq, cfg.logit_cols());
            ce_mean_backward(
                &pack.cache.logits,
                &pack.inst.target_positions,
                &pack.inst.target_tokens,
                off,
                len,
                1.0 / b as f64,
                &mut dlogits,
            );

            // factor path: dz -> encoder input -> pooled -> hidden rows
            let mut d_hidden: Vec<(usize, Mat<T>)> = Vec::new();
            if mode == LoopMode::Stage2 {
                let n_img = pack.inst.attn.image_len;
                for (li, l) in cfg.mid_layers().enumerate() {
                    if l < t_lo {
                        continue;
                    }
                    let mut dh = vec![T::zero(); cfg.width];
                    encode_backward(&pack.pooled[li], enc_sh, &pack.z_sh[li].1, &dz_sh[li], None, Some(&mut dh));
                    encode_backward(&pack.pooled[li], enc_uni, &pack.z_uni[li].1, &dz_uni[li], None, Some(&mut dh));
                    let inv_n = T::of(1.0 / n_img as f64);
                    let mut mat = Mat::zeros(n_img, cfg.width);
                    for r in 0..n_img {
                        for c in 0..cfg.width {
                            *mat.at_mut(r, c) = dh[c] * inv_n;
                        }
                    }
                    d_hidden.push((l, mat));
                }
            }

            let mut grads = BackboneParams::grad_zeros(cfg);
            backward(
                &state.backbone,
                cfg,
                &pack.inst,
                &pack.cache,
                &dlogits,
                &d_hidden,
                &mut grads,
                &BackwardOpts::range(cfg.num_layers, t_lo, t_hi, cfg2.train_output_head),
            );
            grads
        })
        .collect();

    let mut grads = BackboneParams::grad_zeros(cfg);
    for g in &grads_list {
        grads.add_assign(g);
    }

    // ---- optimizer update over the trainable leaves ----
    let sched = LrSchedule {
        warmup: cfg2.optim.warmup_steps,
        total: total_steps,
        peak: cfg2.optim.peak_lr,
        floor: cfg2.optim.floor_lr,
    };
    let lr = lr_at(step, &sched);
    {
        let names: std::collections::HashSet<String> =
            state.opt_bb.names.iter().cloned().collect();
        let grad_leaves = grads.leaves();
        let grads_ref: Vec<(&str, &[T])> = grad_leaves
            .iter()
            .filter(|(n, _)| names.contains(n))
            .map(|(n, s)| (n.as_str(), *s))
            .collect();
        let mut param_leaves = state.backbone.leaves_mut();
        let mut params_ref: Vec<(&str, &mut [T])> = param_leaves
            .iter_mut()
            .filter(|(n, _)| names.contains(n))
            .map(|(n, s)| (n.as_str(), &mut **s))
            .collect();
        state.opt_bb.step(&mut params_ref, &grads_ref, lr);
    }

    // ---- EMA shadow follows the freshly updated trainable leaves ----
    if mode == LoopMode::Stage2 && cfg2.use_sg {
        let decay = ema_decay_at(step, total_steps, cfg2.ema_decay_start, cfg2.ema_decay_end);
        let names: std::collections::HashSet<String> =
            state.ema.iter().map(|(n, _)| n.clone()).collect();
        let bb_leaves = state.backbone.leaves();
        let live: Vec<(String, &[T])> = bb_leaves
            .into_iter()
            .filter(|(n, _)| names.contains(n))
            .collect();
        ema_update(&mut state.ema, &live, decay)?;
    }

    let total = l_und + l_gen + lambda_sha * (l_u2g + l_g2u) + lambda_uni * l_uni;
    let report = LossReport {
        step,
        stage: match mode {
            LoopMode::Stage2 => "stage2".into(),
            LoopMode::Sft => "sft".into(),
        },
        l_und,
        l_gen,
        l_perp,
        l_u2g,
        l_g2u,
        l_uni_estimate: l_uni,
        total,
        lambda_und: 1.0,
        lambda_gen: 1.0,
        lambda_perp: 0.0,
        lambda_sha,
        lambda_uni,
        lr,
    };
    report.check_bookkeeping()?;
    Ok(report)
}

fn add_rows<T: Real>(dst: &mut [Vec<Vec<T>>], li: usize, rows: &Mat<T>) {
    for s in 0..rows.rows() {
        crate::mat::axpy(&mut dst[s][li], T::one(), rows.row(s));
    }
}

fn run_loop<T: Real>(
    mut state: TrainState<T>,
    dataset: &[PairedSample],
    run_until: u64,
    schedule_total: u64,
    mode: LoopMode,
    mut on_report: impl FnMut(&LossReport),
) -> Result<TrainState<T>> {
    if dataset.is_empty() {
        return Err(Error::Argument("training needs a non-empty dataset".into()));
    }
    let run = state.run.clone();
    let cfg2 = &run.stage2;
    let (t_lo, _) = cfg2.trainable_range(&run.model);
    let depth = match mode {
        LoopMode::Stage2 => t_lo.min(run.model.mid_start) - 1,
        LoopMode::Sft => t_lo - 1,
    };
    let mut prefix = PrefixCache::new(depth);
    let enc_digest = state.encoder_digest();
    let stage_tag = match mode {
        LoopMode::Stage2 => STAGE2_TAG,
        LoopMode::Sft => SFT_TAG,
    };
    let batch_size = cfg2.batch_size;
    let log_interval = cfg2.log_interval;

    for step in state.step..run_until {
        let ids = batch_indices(state.seed, stage_tag, step, dataset.len(), batch_size);
        prefix.prefill(&state, &ids, dataset)?;
        let batch: Vec<(usize, &PairedSample)> = ids.iter().map(|&i| (i, &dataset[i])).collect();
        let report = train_step(&mut state, &batch, &prefix, step, schedule_total, mode)?;
        state.step = step + 1;
        if step % log_interval == 0 || step + 1 == schedule_total {
            on_report(&report);
        }
        if !report.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {step}"
            )));
        }
    }

    if mode == LoopMode::Stage2 && state.encoder_digest() != enc_digest {
        return Err(Error::Invariant(
            "stage 2 modified frozen encoder parameters".into(),
        ));
    }
    Ok(state)
}

fn prepare_stage2<T: Real>(run: &RunConfig, mut state: TrainState<T>) -> Result<TrainState<T>> {
    if state.stage != "stage2" {
        if state.stage != "stage1" {
            return Err(Error::Contract(format!(
                "stage 2 needs a stage-1 checkpoint, found stage `{}`",
                state.stage
            )));
        }
        state.run = run.clone();
        state.stage = "stage2".into();
        state.step = 0;
        state.init_ema();
        // fresh stage-2 optimizers under the possibly-overridden config
        let (lo, hi) = run.stage2.trainable_range(&run.model);
        let bb_leaves = trainable_backbone_leaves(
            &state.backbone,
            lo,
            hi,
            run.stage2.train_output_head,
        );
        state.opt_bb = super::AdamW::new(&bb_leaves, run.stage2.optim.clone());
        let d_z = run.factor.d_z;
        state.opt_critic = super::AdamW::new(
            &[("critic.proj".to_string(), d_z * d_z)],
            super::OptimConfig {
                peak_lr: run.stage2.critic_lr,
                floor_lr: run.stage2.critic_lr,
                warmup_steps: 0,
                weight_decay: 0.0,
                ..super::OptimConfig::default()
            },
        );
    } else {
        state.run = run.clone();
    }
    Ok(state)
}

/// Stage-2 loop. `state` must come from a stage-1 run (or a stage-2
/// checkpoint to resume).
pub fn run_stage2<T: Real>(
    run: &RunConfig,
    state: TrainState<T>,
    dataset: &[PairedSample],
    on_report: impl FnMut(&LossReport),
) -> Result<TrainState<T>> {
    let state = prepare_stage2(run, state)?;
    run_loop(
        state,
        dataset,
        run.stage2.steps,
        run.stage2.steps,
        LoopMode::Stage2,
        on_report,
    )
}

/// Stage-2 loop that stops after `stop_at` steps while keeping every
/// schedule anchored to the configured total; resume later from a
/// checkpoint to complete the run.
pub fn run_stage2_until<T: Real>(
    run: &RunConfig,
    state: TrainState<T>,
    dataset: &[PairedSample],
    stop_at: u64,
    on_report: impl FnMut(&LossReport),
) -> Result<TrainState<T>> {
    let mut state = prepare_stage2(run, state)?;
    state.run = run.clone();
    run_loop(
        state,
        dataset,
        stop_at.min(run.stage2.steps),
        run.stage2.steps,
        LoopMode::Stage2,
        on_report,
    )
}

/// SFT baseline: identical loop minus all extra terms, fresh init, matched
/// total step budget (stage-1 + stage-2 steps).
pub fn run_sft_baseline<T: Real>(
    run: &RunConfig,
    dataset: &[PairedSample],
    seed: u64,
    on_report: impl FnMut(&LossReport),
) -> Result<TrainState<T>> {
    let mut state = TrainState::init(run, seed)?;
    state.stage = "sft".into();
    let total = run.stage1.steps + run.stage2.steps;
    run_loop(state, dataset, total, total, LoopMode::Sft, on_report)
}
