//! Representation diagnostics: reconstruction residual between the two
//! flows' subspaces, entropy effective rank and its increment, per-block
//! gradient-conflict cosines, radial frequency profiles of image-token
//! states, factor export, and a 2-D PCA projection.

use crate::backbone::{
    backward, build_gen_flow, build_und_flow, ce_mean_backward, forward_cached, BackboneParams,
    BackwardOpts, ForwardTrace,
};
use crate::error::{Error, Result};
use crate::factorization::encode;
use crate::linalg::{frobenius, singular_values, sym_eig};
use crate::mat::Mat;
use crate::real::Real;
use crate::rng::{stream, Rng};
use crate::synthdata::{sample_mask, PairedSample};
use crate::training::TrainState;
use rayon::prelude::*;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, serde::Serialize)]
pub struct LayerProfile {
    pub layer: usize,
    pub value: f64,
    pub metric: String,
    pub batch_size: usize,
    /// Set when the value is a placeholder for a degenerate input
    /// (zero-norm gradients, zero-variance states).
    pub flagged: bool,
}

#[derive(Debug, Clone)]
pub struct SubspaceBasis {
    /// Orthonormal principal directions as columns (d x k).
    pub columns: Mat<f64>,
    pub retained_variance: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ResidualValue {
    pub value: f64,
    /// True when the reference flow had zero variance and the residual
    /// defaulted to 1.
    pub degenerate: bool,
}

fn to_f64<T: Real>(m: &Mat<T>) -> Mat<f64> {
    Mat::from_fn(m.rows(), m.cols(), |r, c| m.at(r, c).f64())
}

fn column_means(m: &Mat<f64>) -> Vec<f64> {
    let mut mu = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        crate::mat::axpy(&mut mu, 1.0, m.row(r));
    }
    mu.iter_mut().for_each(|x| *x /= m.rows() as f64);
    mu
}

fn center(m: &Mat<f64>, mu: &[f64]) -> Mat<f64> {
    Mat::from_fn(m.rows(), m.cols(), |r, c| m.at(r, c) - mu[c])
}

/// Principal directions of mean-centered rows capturing at least
/// `var_threshold` of the variance.
pub fn pca_basis<T: Real>(u: &Mat<T>, var_threshold: f64) -> Result<Option<SubspaceBasis>> {
    if u.rows() < 2 {
        return Err(Error::Argument(
            "subspace basis needs at least 2 rows".into(),
        ));
    }
    let uf = to_f64(u);
    let mu = column_means(&uf);
    let uc = center(&uf, &mu);
    let cov = Mat::matmul_tn(&uc, &uc);
    let (vals, vecs) = sym_eig(&cov);
    let total: f64 = vals.iter().map(|&l| l.max(0.0)).sum();
    if total <= 1e-24 {
        return Ok(None); // zero variance: degenerate reference
    }
    let mut cum = 0.0;
    let mut k = 0;
    for &l in &vals {
        cum += l.max(0.0);
        k += 1;
        if cum >= var_threshold * total {
            break;
        }
    }
    let columns = Mat::from_fn(u.cols(), k, |r, c| vecs.at(r, c));
    Ok(Some(SubspaceBasis {
        columns,
        retained_variance: cum / total,
    }))
}

/// Fraction of one flow's (centered) state energy unexplained by projection
/// onto the other flow's principal subspace.
pub fn reconstruction_residual<T: Real>(
    g: &Mat<T>,
    u: &Mat<T>,
    var_threshold: f64,
) -> Result<ResidualValue> {
    if g.rows() < 2 || u.rows() < 2 || g.cols() == 0 || g.cols() != u.cols() {
        return Err(Error::Argument(format!(
            "residual needs >= 2 rows each and matching width, got {}x{} vs {}x{}",
            g.rows(),
            g.cols(),
            u.rows(),
            u.cols()
        )));
    }
    let gf = to_f64(g);
    if frobenius(&gf) <= 1e-300 {
        return Err(Error::Argument("residual of an all-zero matrix".into()));
    }
    let basis = match pca_basis(u, var_threshold)? {
        Some(b) => b,
        None => {
            return Ok(ResidualValue {
                value: 1.0,
                degenerate: true,
            })
        }
    };
    // center G by U's mean, then measure what the basis cannot reconstruct
    let uf = to_f64(u);
    let mu = column_means(&uf);
    let gc = center(&gf, &mu);
    let denom = frobenius(&gc).powi(2);
    if denom <= 1e-300 {
        return Err(Error::Argument(
            "residual undefined: G carries no energy after centering".into(),
        ));
    }
    let coords = Mat::matmul(&gc, &basis.columns); // m x k
    let recon = Mat::matmul_nt(&coords, &basis.columns); // m x d
    let mut num = 0.0;
    for i in 0..gc.rows() {
        for j in 0..gc.cols() {
            let d = gc.at(i, j) - recon.at(i, j);
            num += d * d;
        }
    }
    Ok(ResidualValue {
        value: (num / denom).clamp(0.0, 1.0),
        degenerate: false,
    })
}

/// Entropy effective rank: exp of the Shannon entropy of the normalized
/// singular-value distribution. Zero singular values contribute nothing.
pub fn effective_rank<T: Real>(h: &Mat<T>) -> Result<f64> {
    let hf = to_f64(h);
    let total_energy = frobenius(&hf);
    if total_energy <= 1e-300 {
        return Err(Error::Argument("effective rank of an all-zero matrix".into()));
    }
    let sv = singular_values(&hf);
    let sum: f64 = sv.iter().sum();
    let mut entropy = 0.0;
    for &s in &sv {
        let p = s / sum;
        if p > 0.0 {
            entropy -= p * p.ln();
        }
    }
    Ok(entropy.exp())
}

/// ER of the row-stacked pair minus ER of the reference alone.
pub fn er_increment<T: Real>(h_u: &Mat<T>, h_g: &Mat<T>) -> Result<f64> {
    if h_u.cols() != h_g.cols() {
        return Err(Error::Argument(format!(
            "er_increment needs equal widths, got {} and {}",
            h_u.cols(),
            h_g.cols()
        )));
    }
    let mut stacked = Mat::<T>::zeros(h_u.rows() + h_g.rows(), h_u.cols());
    for r in 0..h_u.rows() {
        stacked.row_mut(r).copy_from_slice(h_u.row(r));
    }
    for r in 0..h_g.rows() {
        stacked.row_mut(h_u.rows() + r).copy_from_slice(h_g.row(r));
    }
    Ok(effective_rank(&stacked)? - effective_rank(h_u)?)
}

/// Cosine similarity between two flat gradient vectors, with a degenerate
/// flag when either norm vanishes.
pub fn grad_cosine(a: &[f64], b: &[f64]) -> (f64, bool) {
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na <= 1e-300 || nb <= 1e-300 {
        return (0.0, true);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    ((dot / (na * nb)).clamp(-1.0, 1.0), false)
}

fn layer_grad_flat<T: Real>(grads: &BackboneParams<T>, layer: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for (name, slice) in grads.leaves() {
        if BackboneParams::<T>::leaf_layer(&name) == Some(layer) {
            out.extend(slice.iter().map(|x| x.f64()));
        }
    }
    out
}

fn batch_loss_grads<T: Real>(
    state: &TrainState<T>,
    samples: &[(usize, &PairedSample)],
    seed: u64,
    und_side: bool,
) -> Result<BackboneParams<T>> {
    let cfg = &state.run.model;
    let per: Vec<Result<BackboneParams<T>>> = samples
        .par_iter()
        .enumerate()
        .map(|(slot, (sid, sample))| {
            let inst = if und_side {
                build_und_flow(sample, *sid, cfg)?
            } else {
                let mut mrng = Rng::derive(seed, stream::EVAL, slot as u64);
                let mask = sample_mask(&state.run.mask, cfg.grid_side, &mut mrng)?;
                build_gen_flow(sample, &mask, *sid, cfg)?
            };
            let cache = forward_cached(&state.backbone, cfg, &inst)?;
            let (off, len) = if und_side {
                cfg.text_slice()
            } else {
                cfg.visual_slice()
            };
            let mut dlogits = Mat::zeros(cache.seq, cfg.logit_cols());
            ce_mean_backward(
                &cache.logits,
                &inst.target_positions,
                &inst.target_tokens,
                off,
                len,
                1.0 / samples.len() as f64,
                &mut dlogits,
            );
            let mut grads = BackboneParams::grad_zeros(cfg);
            backward(
                &state.backbone,
                cfg,
                &inst,
                &cache,
                &dlogits,
                &[],
                &mut grads,
                &BackwardOpts::train_all(cfg.num_layers),
            );
            Ok(grads)
        })
        .collect();
    let mut total = BackboneParams::grad_zeros(cfg);
    for g in per {
        total.add_assign(&g?);
    }
    Ok(total)
}

/// Per-block cosine between the batch-averaged gradients of the two native
/// task losses.
pub fn grad_conflict_profile<T: Real>(
    state: &TrainState<T>,
    samples: &[(usize, &PairedSample)],
    seed: u64,
) -> Result<Vec<LayerProfile>> {
    if samples.is_empty() {
        return Err(Error::Argument("gradient profile needs samples".into()));
    }
    let g_und = batch_loss_grads(state, samples, seed, true)?;
    let g_gen = batch_loss_grads(state, samples, seed, false)?;
    let mut out = Vec::new();
    for layer in 1..=state.run.model.num_layers {
        let a = layer_grad_flat(&g_und, layer);
        let b = layer_grad_flat(&g_gen, layer);
        let (value, flagged) = grad_cosine(&a, &b);
        out.push(LayerProfile {
            layer,
            value,
            metric: "grad_conflict_cosine".into(),
            batch_size: samples.len(),
            flagged,
        });
    }
    Ok(out)
}

/// Per-channel 2-D spectral energy above a radial cutoff, DC excluded from
/// numerator and denominator, averaged over channels.
pub fn freq_profile<T: Real>(
    trace: &ForwardTrace<T>,
    cutoff_fraction: f64,
) -> Result<Vec<LayerProfile>> {
    let n = trace
        .hidden
        .first()
        .ok_or_else(|| Error::Argument("trace holds no hidden states".into()))?
        .rows();
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n {
        return Err(Error::Argument(format!(
            "image positions must form a square grid, got {n} tokens"
        )));
    }
    let threshold = cutoff_fraction * 0.5; // Nyquist = 0.5 cycles/sample
    let mut out = Vec::new();
    for (idx, h) in trace.hidden.iter().enumerate() {
        let hf = to_f64(h);
        let d = hf.cols();
        let mut ratio_sum = 0.0;
        for c in 0..d {
            let field: Vec<f64> = (0..n).map(|r| hf.at(r, c)).collect();
            let energy = dft2_energy(&field, g);
            let all: f64 = energy.iter().sum();
            let mut hi = 0.0;
            let mut tot = 0.0;
            for u in 0..g {
                for v in 0..g {
                    if u == 0 && v == 0 {
                        continue;
                    }
                    let fu = (u.min(g - u)) as f64 / g as f64;
                    let fv = (v.min(g - v)) as f64 / g as f64;
                    let rho = (fu * fu + fv * fv).sqrt();
                    let e = energy[u * g + v];
                    tot += e;
                    if rho > threshold {
                        hi += e;
                    }
                }
            }
            // a spatially constant channel has all energy at DC; rounding
            // residue below the spectral noise floor counts as zero
            ratio_sum += if tot > 1e-12 * all.max(1e-300) { hi / tot } else { 0.0 };
        }
        out.push(LayerProfile {
            layer: idx + 1,
            value: (ratio_sum / d as f64).clamp(0.0, 1.0),
            metric: "high_freq_energy_ratio".into(),
            batch_size: 1,
            flagged: false,
        });
    }
    Ok(out)
}

/// |DFT2(field)|^2 for a real G x G field, via separable direct transforms.
fn dft2_energy(field: &[f64], g: usize) -> Vec<f64> {
    let tw: Vec<(f64, f64)> = (0..g)
        .map(|k| {
            let a = -2.0 * std::f64::consts::PI * k as f64 / g as f64;
            (a.cos(), a.sin())
        })
        .collect();
    // rows
    let mut rows_re = vec![0.0; g * g];
    let mut rows_im = vec![0.0; g * g];
    for r in 0..g {
        for k in 0..g {
            let mut re = 0.0;
            let mut im = 0.0;
            for x in 0..g {
                let (c, s) = tw[(k * x) % g];
                let v = field[r * g + x];
                re += v * c;
                im += v * s;
            }
            rows_re[r * g + k] = re;
            rows_im[r * g + k] = im;
        }
    }
    // columns
    let mut energy = vec![0.0; g * g];
    for k in 0..g {
        for u in 0..g {
            let mut re = 0.0;
            let mut im = 0.0;
            for y in 0..g {
                let (c, s) = tw[(u * y) % g];
                let (vr, vi) = (rows_re[y * g + k], rows_im[y * g + k]);
                re += vr * c - vi * s;
                im += vr * s + vi * c;
            }
            energy[u * g + k] = re * re + im * im;
        }
    }
    energy
}

/// Mean-center and project onto the top-2 principal directions. The sign of
/// each direction is fixed by making its largest-magnitude loading positive.
pub fn pca_project2d<T: Real>(factors: &Mat<T>) -> Result<Mat<f64>> {
    if factors.rows() < 3 {
        return Err(Error::Argument("projection needs at least 3 rows".into()));
    }
    let f = to_f64(factors);
    let mu = column_means(&f);
    let fc = center(&f, &mu);
    let cov = Mat::matmul_tn(&fc, &fc);
    let (vals, vecs) = sym_eig(&cov);
    if vals.first().copied().unwrap_or(0.0) <= 1e-24 {
        return Err(Error::Argument("projection of rank-0 input".into()));
    }
    let mut basis = Mat::from_fn(f.cols(), 2.min(f.cols()), |r, c| vecs.at(r, c));
    for c in 0..basis.cols() {
        let mut best = 0;
        for r in 0..basis.rows() {
            if basis.at(r, c).abs() > basis.at(best, c).abs() {
                best = r;
            }
        }
        if basis.at(best, c) < 0.0 {
            for r in 0..basis.rows() {
                *basis.at_mut(r, c) = -basis.at(r, c);
            }
        }
    }
    Ok(Mat::matmul(&fc, &basis))
}

/// Trailing (unexplained) covariance eigenvalue mass of a 2-D projection;
/// exposed for the reconstruction-error oracle.
pub fn pca_trailing_eigenvalue_sum<T: Real>(factors: &Mat<T>) -> Result<f64> {
    let f = to_f64(factors);
    let mu = column_means(&f);
    let fc = center(&f, &mu);
    let cov = Mat::matmul_tn(&fc, &fc);
    let (vals, _) = sym_eig(&cov);
    Ok(vals.iter().skip(2).map(|&l| l.max(0.0)).sum())
}

/// Export every factor vector of every sample to CSV:
/// sample_id, anchor fields, flow, layer, factor_kind, then d_z columns.
/// Masks derive from the state's seed, so re-export is byte-identical.
pub fn export_factors<T: Real>(
    state: &TrainState<T>,
    dataset: &[PairedSample],
    path: &Path,
) -> Result<()> {
    let cfg = &state.run.model;
    let d_z = state.run.factor.d_z;
    let mut rows: Vec<String> = Vec::new();
    let mut header = String::from("sample_id,shape_class,color_class,quadrant,flow,layer,factor_kind");
    for i in 0..d_z {
        header.push_str(&format!(",z{i}"));
    }
    rows.push(header);

    for (i, sample) in dataset.iter().enumerate() {
        let und = build_und_flow(sample, i, cfg)?;
        let und_cache = forward_cached(&state.backbone, cfg, &und)?;
        let mut mrng = Rng::derive(state.seed, stream::EXPORT, i as u64);
        let mask = sample_mask(&state.run.mask, cfg.grid_side, &mut mrng)?;
        let gen = build_gen_flow(sample, &mask, i, cfg)?;
        let gen_cache = forward_cached(&state.backbone, cfg, &gen)?;
        for l in cfg.mid_layers() {
            let hu = crate::backbone::pool_rows(
                &und_cache.layer(l).x_out,
                und.attn.image_start,
                und.attn.image_len,
            );
            let hg = crate::backbone::pool_rows(
                &gen_cache.layer(l).x_out,
                gen.attn.image_start,
                gen.attn.image_len,
            );
            for (flow, kind, z) in [
                ("U", "sh", encode(&hu, &state.encoders.sh_u)?.0),
                ("U", "uni", encode(&hu, &state.encoders.uni_u)?.0),
                ("G", "sh", encode(&hg, &state.encoders.sh_g)?.0),
                ("G", "uni", encode(&hg, &state.encoders.uni_g)?.0),
            ] {
                let mut line = format!(
                    "{i},{},{},{},{flow},{l},{kind}",
                    sample.anchor.shape_class, sample.anchor.color_class, sample.anchor.quadrant
                );
                for v in &z {
                    line.push_str(&format!(",{v}"));
                }
                rows.push(line);
            }
        }
    }

    let tmp = path.with_extension("csv.tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        for r in &rows {
            f.write_all(r.as_bytes())?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Write a metric series as the documented CSV (layer, value, metric,
/// batch_size).
pub fn write_profile_csv(profiles: &[LayerProfile], path: &Path) -> Result<()> {
    let tmp = path.with_extension("csv.tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        writeln!(f, "layer,value,metric,batch_size")?;
        for p in profiles {
            writeln!(f, "{},{},{},{}", p.layer, p.value, p.metric, p.batch_size)?;
        }
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Layer-stacked image-token states for both flows over a batch of samples,
/// used by the residual/ER diagnostics.
pub fn flow_state_matrices<T: Real>(
    state: &TrainState<T>,
    samples: &[(usize, &PairedSample)],
    seed: u64,
) -> Result<(Vec<Mat<T>>, Vec<Mat<T>>)> {
    let cfg = &state.run.model;
    let un_layers = cfg.num_layers;
    let n = cfg.n_image_tokens();
    let mut h_u: Vec<Mat<T>> = (0..un_layers)
        .map(|_| Mat::zeros(samples.len() * n, cfg.width))
        .collect();
    let mut h_g = h_u.clone();
    for (bi, (sid, sample)) in samples.iter().enumerate() {
        let und = build_und_flow(sample, *sid, cfg)?;
        let tu = crate::backbone::forward(&state.backbone, cfg, &und)?;
        let mut mrng = Rng::derive(seed, stream::EVAL, bi as u64);
        let mask = sample_mask(&state.run.mask, cfg.grid_side, &mut mrng)?;
        let gen = build_gen_flow(sample, &mask, *sid, cfg)?;
        let tg = crate::backbone::forward(&state.backbone, cfg, &gen)?;
        for l in 0..un_layers {
            for r in 0..n {
                h_u[l].row_mut(bi * n + r).copy_from_slice(tu.hidden[l].row(r));
                h_g[l].row_mut(bi * n + r).copy_from_slice(tg.hidden[l].row(r));
            }
        }
    }
    Ok((h_u, h_g))
}

/// Reconstruction residual per layer, both directions (G given U's subspace
/// and U given G's).
pub fn residual_profiles<T: Real>(
    state: &TrainState<T>,
    samples: &[(usize, &PairedSample)],
    seed: u64,
    var_threshold: f64,
) -> Result<Vec<LayerProfile>> {
    let (h_u, h_g) = flow_state_matrices(state, samples, seed)?;
    let mut out = Vec::new();
    for (idx, (hu, hg)) in h_u.iter().zip(&h_g).enumerate() {
        let layer = idx + 1;
        let rg = reconstruction_residual(hg, hu, var_threshold)?;
        out.push(LayerProfile {
            layer,
            value: rg.value,
            metric: "residual_g_given_u".into(),
            batch_size: samples.len(),
            flagged: rg.degenerate,
        });
        let ru = reconstruction_residual(hu, hg, var_threshold)?;
        out.push(LayerProfile {
            layer,
            value: ru.value,
            metric: "residual_u_given_g".into(),
            batch_size: samples.len(),
            flagged: ru.degenerate,
        });
    }
    Ok(out)
}

/// Effective-rank increment per layer, both directions.
pub fn er_profiles<T: Real>(
    state: &TrainState<T>,
    samples: &[(usize, &PairedSample)],
    seed: u64,
) -> Result<Vec<LayerProfile>> {
    let (h_u, h_g) = flow_state_matrices(state, samples, seed)?;
    let mut out = Vec::new();
    for (idx, (hu, hg)) in h_u.iter().zip(&h_g).enumerate() {
        let layer = idx + 1;
        out.push(LayerProfile {
            layer,
            value: er_increment(hu, hg)?,
            metric: "er_increment_g_given_u".into(),
            batch_size: samples.len(),
            flagged: false,
        });
        out.push(LayerProfile {
            layer,
            value: er_increment(hg, hu)?,
            metric: "er_increment_u_given_g".into(),
            batch_size: samples.len(),
            flagged: false,
        });
    }
    Ok(out)
}

/// Batch-averaged high-frequency energy ratios per layer for both flows.
pub fn freq_profiles<T: Real>(
    state: &TrainState<T>,
    samples: &[(usize, &PairedSample)],
    seed: u64,
    cutoff_fraction: f64,
) -> Result<Vec<LayerProfile>> {
    let cfg = &state.run.model;
    let l = cfg.num_layers;
    let mut und_acc = vec![0.0; l];
    let mut gen_acc = vec![0.0; l];
    for (slot, (sid, sample)) in samples.iter().enumerate() {
        let und = build_und_flow(sample, *sid, cfg)?;
        let tu = crate::backbone::forward(&state.backbone, cfg, &und)?;
        for p in freq_profile(&tu, cutoff_fraction)? {
            und_acc[p.layer - 1] += p.value / samples.len() as f64;
        }
        let mut mrng = Rng::derive(seed, stream::EVAL, slot as u64);
        let mask = sample_mask(&state.run.mask, cfg.grid_side, &mut mrng)?;
        let gen = build_gen_flow(sample, &mask, *sid, cfg)?;
        let tg = crate::backbone::forward(&state.backbone, cfg, &gen)?;
        for p in freq_profile(&tg, cutoff_fraction)? {
            gen_acc[p.layer - 1] += p.value / samples.len() as f64;
        }
    }
    let mut out = Vec::new();
    for layer in 1..=l {
        out.push(LayerProfile {
            layer,
            value: und_acc[layer - 1],
            metric: "high_freq_ratio_und".into(),
            batch_size: samples.len(),
            flagged: false,
        });
        out.push(LayerProfile {
            layer,
            value: gen_acc[layer - 1],
            metric: "high_freq_ratio_gen".into(),
            batch_size: samples.len(),
            flagged: false,
        });
    }
    Ok(out)
}
