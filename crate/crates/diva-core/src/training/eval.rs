//! Held-out evaluation: native task losses, token accuracies, cross-flow
//! shared-factor retrieval, and the MI estimates used by the disentanglement
//! checks.

use super::TrainState;
use crate::backbone::{build_gen_flow, build_und_flow, ce_mean, forward_cached, pool_rows};
use crate::error::{Error, Result};
use crate::factorization::encode;
use crate::mat::Mat;
use crate::mi::{infonce, nce_club, Critic, FactorBatch};
use crate::real::Real;
use crate::rng::{stream, Rng};
use crate::synthdata::{sample_mask, PairedSample};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub val_l_und: f64,
    pub val_l_gen: f64,
    /// Top-1 accuracy at masked image cells (visual-slice argmax).
    pub masked_top1: f64,
    /// Top-1 accuracy at caption target positions (text-slice argmax).
    pub caption_top1: f64,
    /// Fraction of samples whose understanding-flow shared factor is nearest
    /// (layer-averaged cosine) to its own generation-flow shared factor.
    pub retrieval_at1: f64,
    /// InfoNCE lower bound between the two flows' shared factors (nats).
    pub shared_mi_lower: f64,
    /// NCE-CLUB estimate between the two flows' unique factors under the
    /// trained critic (nats).
    pub uni_club: f64,
}

struct SampleEval<T> {
    l_und: f64,
    l_gen: f64,
    cap_hits: usize,
    cap_total: usize,
    mask_hits: usize,
    mask_total: usize,
    z_sh_u: Vec<Vec<T>>,
    z_uni_u: Vec<Vec<T>>,
    z_sh_g: Vec<Vec<T>>,
    z_uni_g: Vec<Vec<T>>,
}

fn top1_hits<T: Real>(
    logits: &Mat<T>,
    positions: &[usize],
    targets: &[u32],
    off: usize,
    len: usize,
) -> usize {
    positions
        .iter()
        .zip(targets)
        .filter(|(&p, &t)| {
            let row = &logits.row(p)[off..off + len];
            let mut best = 0usize;
            for (i, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = i;
                }
            }
            best == t as usize
        })
        .count()
}

/// Evaluate a checkpointed state on held-out samples. Masks draw from the
/// `eval_seed` stream, so a fixed seed gives a reproducible report.
pub fn evaluate<T: Real>(
    state: &TrainState<T>,
    samples: &[PairedSample],
    eval_seed: u64,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Argument("evaluation needs a non-empty dataset".into()));
    }
    let cfg = &state.run.model;
    let run = &state.run;
    let n_mid = cfg.n_mid_layers();

    let evals: Vec<Result<SampleEval<T>>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            let und = build_und_flow(sample, i, cfg)?;
            let und_cache = forward_cached(&state.backbone, cfg, &und)?;
            let mut mrng = Rng::derive(eval_seed, stream::EVAL, i as u64);
            let mask = sample_mask(&run.mask, cfg.grid_side, &mut mrng)?;
            let gen = build_gen_flow(sample, &mask, i, cfg)?;
            let gen_cache = forward_cached(&state.backbone, cfg, &gen)?;

            let (t_off, t_len) = cfg.text_slice();
            let (v_off, v_len) = cfg.visual_slice();
            let l_und = ce_mean(&und_cache.logits, &und.target_positions, &und.target_tokens, t_off, t_len);
            let l_gen = ce_mean(&gen_cache.logits, &gen.target_positions, &gen.target_tokens, v_off, v_len);
            let cap_hits = top1_hits(&und_cache.logits, &und.target_positions, &und.target_tokens, t_off, t_len);
            let mask_hits = top1_hits(&gen_cache.logits, &gen.target_positions, &gen.target_tokens, v_off, v_len);

            let mut z_sh_u = Vec::with_capacity(n_mid);
            let mut z_uni_u = Vec::with_capacity(n_mid);
            let mut z_sh_g = Vec::with_capacity(n_mid);
            let mut z_uni_g = Vec::with_capacity(n_mid);
            for l in cfg.mid_layers() {
                let hu = pool_rows(&und_cache.layer(l).x_out, und.attn.image_start, und.attn.image_len);
                let hg = pool_rows(&gen_cache.layer(l).x_out, gen.attn.image_start, gen.attn.image_len);
                z_sh_u.push(encode(&hu, &state.encoders.sh_u)?.0);
                z_uni_u.push(encode(&hu, &state.encoders.uni_u)?.0);
                z_sh_g.push(encode(&hg, &state.encoders.sh_g)?.0);
                z_uni_g.push(encode(&hg, &state.encoders.uni_g)?.0);
            }
            Ok(SampleEval {
                l_und,
                l_gen,
                cap_hits,
                cap_total: und.target_positions.len(),
                mask_hits,
                mask_total: gen.target_positions.len(),
                z_sh_u,
                z_uni_u,
                z_sh_g,
                z_uni_g,
            })
        })
        .collect();

    let mut es = Vec::with_capacity(samples.len());
    for e in evals {
        es.push(e?);
    }
    let n = es.len();
    let val_l_und = es.iter().map(|e| e.l_und).sum::<f64>() / n as f64;
    let val_l_gen = es.iter().map(|e| e.l_gen).sum::<f64>() / n as f64;
    let cap_total: usize = es.iter().map(|e| e.cap_total).sum();
    let mask_total: usize = es.iter().map(|e| e.mask_total).sum();
    let caption_top1 = es.iter().map(|e| e.cap_hits).sum::<usize>() as f64 / cap_total.max(1) as f64;
    let masked_top1 = es.iter().map(|e| e.mask_hits).sum::<usize>() as f64 / mask_total.max(1) as f64;

    let retrieval_at1 = retrieval_layer_averaged(
        &(0..n_mid)
            .map(|li| collect_rows(&es, |e| &e.z_sh_u[li]))
            .collect::<Vec<_>>(),
        &(0..n_mid)
            .map(|li| collect_rows(&es, |e| &e.z_sh_g[li]))
            .collect::<Vec<_>>(),
    )?;

    let ids: Vec<usize> = (0..n).collect();
    let cos = Critic::<T>::cosine(run.stage2.tau);
    let mut shared_mi_lower = 0.0;
    let mut uni_club = 0.0;
    if n >= 2 {
        for li in 0..n_mid {
            let zu = FactorBatch::new(collect_rows(&es, |e| &e.z_sh_u[li]), ids.clone())?;
            let zg = FactorBatch::new(collect_rows(&es, |e| &e.z_sh_g[li]), ids.clone())?;
            shared_mi_lower += infonce(&zu, &zg, &cos)?.mi_lower / n_mid as f64;
            let uu = FactorBatch::new(collect_rows(&es, |e| &e.z_uni_u[li]), ids.clone())?;
            let ug = FactorBatch::new(collect_rows(&es, |e| &e.z_uni_g[li]), ids.clone())?;
            uni_club += nce_club(&uu, &ug, &state.uni_critic)? / n_mid as f64;
        }
    }

    Ok(EvalReport {
        n,
        val_l_und,
        val_l_gen,
        masked_top1,
        caption_top1,
        retrieval_at1,
        shared_mi_lower,
        uni_club,
    })
}

fn collect_rows<T: Real, F: Fn(&SampleEval<T>) -> &Vec<T>>(es: &[SampleEval<T>], f: F) -> Mat<T> {
    let d = f(&es[0]).len();
    let mut m = Mat::zeros(es.len(), d);
    for (r, e) in es.iter().enumerate() {
        m.row_mut(r).copy_from_slice(f(e));
    }
    m
}

/// Retrieval@1 under the layer-averaged cosine similarity between the two
/// factor families (rows aligned by sample).
pub fn retrieval_layer_averaged<T: Real>(zu: &[Mat<T>], zg: &[Mat<T>]) -> Result<f64> {
    if zu.is_empty() || zu.len() != zg.len() {
        return Err(Error::Contract("layer lists must align".into()));
    }
    let n = zu[0].rows();
    if n == 0 {
        return Err(Error::Argument("empty factor batch".into()));
    }
    let mut sim = Mat::<f64>::zeros(n, n);
    for (u, g) in zu.iter().zip(zg) {
        let un = normalize(u)?;
        let gn = normalize(g)?;
        let s = Mat::matmul_nt(&un, &gn);
        for i in 0..n {
            for j in 0..n {
                *sim.at_mut(i, j) += s.at(i, j) / zu.len() as f64;
            }
        }
    }
    let mut hits = 0usize;
    for i in 0..n {
        let row = sim.row(i);
        let mut best = 0usize;
        for (j, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = j;
            }
        }
        if best == i {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

fn normalize<T: Real>(m: &Mat<T>) -> Result<Mat<f64>> {
    let mut out = Mat::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let norm = crate::mat::norm2(m.row(r)).f64();
        if norm < crate::mi::NORM_FLOOR {
            return Err(Error::Numeric(format!("zero-norm factor at row {r}")));
        }
        for c in 0..m.cols() {
            *out.at_mut(r, c) = m.at(r, c).f64() / norm;
        }
    }
    Ok(out)
}
