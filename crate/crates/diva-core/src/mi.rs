//! Contrastive mutual-information machinery: InfoNCE lower bound, directed
//! stop-gradient InfoNCE, the NCE-CLUB upper-bound estimate, and the
//! orthogonality penalty between shared and unique factors.

use crate::error::{Error, Result};
use crate::factorization::FactorSet;
use crate::mat::{dot, Mat};
use crate::real::Real;
use serde::{Deserialize, Serialize};

pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CriticKind {
    Cosine,
    Bilinear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Critic<T> {
    pub kind: CriticKind,
    /// Learned square matrix for the bilinear critic; unused for cosine.
    pub proj: Option<Mat<T>>,
    pub temperature: f64,
}

impl<T: Real> Critic<T> {
    pub fn cosine(temperature: f64) -> Self {
        Critic {
            kind: CriticKind::Cosine,
            proj: None,
            temperature,
        }
    }

    pub fn bilinear(d_z: usize, rng: &mut crate::rng::Rng) -> Self {
        Critic {
            kind: CriticKind::Bilinear,
            proj: Some(Mat::randn(d_z, d_z, 1.0 / (d_z as f64).sqrt(), rng)),
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FactorBatch<T> {
    /// B x d_z factor rows.
    pub z: Mat<T>,
    pub sample_ids: Vec<usize>,
}

impl<T: Real> FactorBatch<T> {
    pub fn new(z: Mat<T>, sample_ids: Vec<usize>) -> Result<Self> {
        if z.rows() != sample_ids.len() {
            return Err(Error::Contract(
                "factor batch rows and sample_ids length differ".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for &id in &sample_ids {
            if !seen.insert(id) {
                return Err(Error::Contract(format!(
                    "sample_ids must be pairwise distinct (duplicate {id})"
                )));
            }
        }
        Ok(FactorBatch { z, sample_ids })
    }

    pub fn batch(&self) -> usize {
        self.z.rows()
    }
}

fn check_pair<T: Real>(za: &FactorBatch<T>, zb: &FactorBatch<T>) -> Result<()> {
    if za.batch() != zb.batch() || za.z.cols() != zb.z.cols() {
        return Err(Error::Contract(format!(
            "factor batches must agree in shape: {}x{} vs {}x{}",
            za.batch(),
            za.z.cols(),
            zb.batch(),
            zb.z.cols()
        )));
    }
    if za.sample_ids != zb.sample_ids {
        return Err(Error::Contract(
            "factor batches must be aligned by sample id".into(),
        ));
    }
    Ok(())
}

fn check_contrastive<T: Real>(za: &FactorBatch<T>, zb: &FactorBatch<T>) -> Result<()> {
    check_pair(za, zb)?;
    if za.batch() < 2 {
        return Err(Error::Contract(
            "contrastive objectives need batch size >= 2".into(),
        ));
    }
    Ok(())
}

/// Row-normalized copy plus norms; errors на zero norms.
fn normalize_rows<T: Real>(z: &Mat<T>) -> Result<(Mat<T>, Vec<T>)> {
    let mut out = z.clone();
    let mut norms = Vec::with_capacity(z.rows());
    for r in 0..z.rows() {
        let n = crate::mat::norm2(z.row(r));
        if n.f64() < NORM_FLOOR {
            return Err(Error::Numeric(format!(
                "zero-norm factor vector at row {r} (norm floor {NORM_FLOOR})"
            )));
        }
        let inv = T::one() / n;
        out.row_mut(r).iter_mut().for_each(|x| *x *= inv);
        norms.push(n);
    }
    Ok((out, norms))
}

struct ScoreCache<T> {
    scores: Mat<T>,
    /// Cosine critic: normalized rows and norms of both sides.
    a_hat: Option<(Mat<T>, Vec<T>)>,
    b_hat: Option<(Mat<T>, Vec<T>)>,
}

fn score_cache<T: Real>(
    za: &FactorBatch<T>,
    zb: &FactorBatch<T>,
    critic: &Critic<T>,
) -> Result<ScoreCache<T>> {
    if critic.temperature <= 0.0 {
        return Err(Error::Config {
            field: "temperature".into(),
            msg: "must be > 0".into(),
        });
    }
    let inv_tau = T::of(1.0 / critic.temperature);
    match critic.kind {
        CriticKind::Cosine => {
            let (a_hat, a_norms) = normalize_rows(&za.z)?;
            let (b_hat, b_norms) = normalize_rows(&zb.z)?;
            let mut scores = Mat::matmul_nt(&a_hat, &b_hat);
            scores.as_mut_slice().iter_mut().for_each(|s| *s *= inv_tau);
            Ok(ScoreCache {
                scores,
                a_hat: Some((a_hat, a_norms)),
                b_hat: Some((b_hat, b_norms)),
            })
        }
        CriticKind::Bilinear => {
            let m = critic
                .proj
                .as_ref()
                .ok_or_else(|| Error::Contract("bilinear critic lacks its matrix".into()))?;
            if m.rows() != za.z.cols() || m.cols() != zb.z.cols() {
                return Err(Error::Contract(format!(
                    "bilinear matrix {}x{} does not match factor dim {}",
                    m.rows(),
                    m.cols(),
                    za.z.cols()
                )));
            }
            if m.as_slice().iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric("non-finite bilinear critic matrix".into()));
            }
            let am = Mat::matmul(&za.z, m);
            let mut scores = Mat::matmul_nt(&am, &zb.z);
            scores.as_mut_slice().iter_mut().for_each(|s| *s *= inv_tau);
            Ok(ScoreCache {
                scores,
                a_hat: None,
                b_hat: None,
            })
        }
    }
}

/// Critic score matrix: entry (i, j) = f(za_i, zb_j).
pub fn critic_score<T: Real>(
    za: &FactorBatch<T>,
    zb: &FactorBatch<T>,
    critic: &Critic<T>,
) -> Result<Mat<T>> {
    check_pair(za, zb)?;
    Ok(score_cache(za, zb, critic)?.scores)
}

#[derive(Debug, Clone, Copy)]
pub struct InfoNce {
    pub loss: f64,
    pub mi_lower: f64,
}

/// Row softmax probabilities and the mean InfoNCE loss, stabilized by
/// row-max subtraction.
fn softmax_loss<T: Real>(scores: &Mat<T>) -> (Mat<T>, f64) {
    let b = scores.rows();
    let mut probs = Mat::zeros(b, b);
    let mut loss = 0.0;
    for i in 0..b {
        let row = scores.row(i);
        let mut m = row[0];
        for &x in row {
            m = m.maxv(x);
        }
        let mut sum = T::zero();
        for &x in row {
            sum += (x - m).exp();
        }
        let lse = (m + sum.ln()).f64();
        loss += lse - row[i].f64();
        let inv = T::one() / sum;
        let prow = probs.row_mut(i);
        for j in 0..b {
            prow[j] = (row[j] - m).exp() * inv;
        }
    }
    (probs, loss / b as f64)
}

/// InfoNCE with in-batch negatives (all j != i); positives on the diagonal.
pub fn infonce<T: Real>(
    za: &FactorBatch<T>,
    zb: &FactorBatch<T>,
    critic: &Critic<T>,
) -> Result<InfoNce> {
    check_contrastive(za, zb)?;
    let cache = score_cache(za, zb, critic)?;
    let (_, loss) = softmax_loss(&cache.scores);
    Ok(InfoNce {
        loss,
        mi_lower: (za.batch() as f64).ln() - loss,
    })
}

/// Gradient outputs of the contrastive objectives; any side may be skipped.
#[derive(Debug)]
pub struct MiGrads<T> {
    pub d_za: Option<Mat<T>>,
    pub d_zb: Option<Mat<T>>,
    pub d_proj: Option<Mat<T>>,
}

impl<T> Default for MiGrads<T> {
    fn default() -> Self {
        MiGrads {
            d_za: None,
            d_zb: None,
            d_proj: None,
        }
    }
}

/// Shared backward: given dL/ds coefficients, push through the critic.
fn score_backward<T: Real>(
    za: &FactorBatch<T>,
    zb: &FactorBatch<T>,
    critic: &Critic<T>,
    cache: &ScoreCache<T>,
    coeff: &Mat<T>,
    want_da: bool,
    want_db: bool,
    want_dm: bool,
) -> MiGrads<T> {
    let inv_tau = T::of(1.0 / critic.temperature);
    let b = za.batch();
    match critic.kind {
        CriticKind::Cosine => {
            let (a_hat, a_norms) = cache.a_hat.as_ref().unwrap();
            let (b_hat, b_norms) = cache.b_hat.as_ref().unwrap();
            // cos(i,j) = scores * tau
            let tau = T::of(critic.temperature);
            let mut g = MiGrads::default();
            if want_da {
                let u = Mat::matmul(coeff, b_hat); // B x d_z
                let mut da = Mat::zeros(b, a_hat.cols());
                for i in 0..b {
                    let mut w = T::zero();
                    for j in 0..b {
                        w += coeff.at(i, j) * cache.scores.at(i, j) * tau;
                    }
                    let scale = inv_tau / a_norms[i];
                    let dr = da.row_mut(i);
                    let ur = u.row(i);
                    let ar = a_hat.row(i);
                    for c in 0..dr.len() {
                        dr[c] = scale * (ur[c] - w * ar[c]);
                    }
                }
                g.d_za = Some(da);
            }
            if want_db {
                let v = Mat::matmul_tn(coeff, a_hat); // B x d_z (coeff^T @ a_hat)
                let mut db = Mat::zeros(b, b_hat.cols());
                for j in 0..b {
                    let mut w = T::zero();
                    for i in 0..b {
                        w += coeff.at(i, j) * cache.scores.at(i, j) * tau;
                    }
                    let scale = inv_tau / b_norms[j];
                    let dr = db.row_mut(j);
                    let vr = v.row(j);
                    let br = b_hat.row(j);
                    for c in 0..dr.len() {
                        dr[c] = scale * (vr[c] - w * br[c]);
                    }
                }
                g.d_zb = Some(db);
            }
            g
        }
        CriticKind::Bilinear => {
            let m = critic.proj.as_ref().unwrap();
            let mut g = MiGrads::default();
            if want_da {
                let cb = Mat::matmul(coeff, &zb.z); // B x d_z
                // dA = C @ B @ M^T
                let mut da = Mat::matmul_nt(&cb, m);
                da.as_mut_slice().iter_mut().for_each(|x| *x *= inv_tau);
                g.d_za = Some(da);
            }
            if want_db {
                let ca = Mat::matmul_tn(coeff, &za.z); // B x d_z
                let mut db = Mat::matmul(&ca, m);
                db.as_mut_slice().iter_mut().for_each(|x| *x *= inv_tau);
                g.d_zb = Some(db);
            }
            if want_dm {
                let ac = Mat::matmul_tn(&za.z, coeff); // d_z x B
                let mut dm = Mat::matmul(&ac, &zb.z);
                dm.as_mut_slice().iter_mut().for_each(|x| *x *= inv_tau);
                g.d_proj = Some(dm);
            }
            g
        }
    }
}

/// InfoNCE loss, bound, and gradients scaled by `scale`.
pub fn infonce_with_grads<T: Real>(
    za: &FactorBatch<T>,
    zb: &FactorBatch<T>,
    critic: &Critic<T>,
    want_da: bool,
    want_db: bool,
    want_dm: bool,
    scale: f64,
) -> Result<(InfoNce, MiGrads<T>)> {
    check_contrastive(za, zb)?;
    let cache = score_cache(za, zb, critic)?;
    let (probs, loss) = softmax_loss(&cache.scores);
    let b = za.batch();
    let w = T::of(scale / b as f64);
    let mut coeff = probs;
    for i in 0..b {
        *coeff.at_mut(i, i) -= T::one();
    }
    coeff.as_mut_slice().iter_mut().for_each(|x| *x *= w);
    let grads = score_backward(za, zb, critic, &cache, &coeff, want_da, want_db, want_dm);
    Ok((
        InfoNce {
            loss,
            mi_lower: (b as f64).ln() - loss,
        },
        grads,
    ))
}

/// Asymmetric alignment term: identical value to `infonce(...).loss`, but
/// sensitivities flow only into the source side (and the critic). The target
/// batch is treated as a constant — the stop-gradient contract.
pub fn directed_infonce<T: Real>(
    z_src: &FactorBatch<T>,
    z_tgt_detached: &FactorBatch<T>,
    critic: &Critic<T>,
) -> Result<f64> {
    Ok(infonce(z_src, z_tgt_detached, critic)?.loss)
}

/// Directed InfoNCE with source-side gradients only.
pub fn directed_infonce_with_grads<T: Real>(
    z_src: &FactorBatch<T>,
    z_tgt_detached: &FactorBatch<T>,
    critic: &Critic<T>,
    scale: f64,
) -> Result<(f64, Mat<T>)> {
    let (out, grads) = infonce_with_grads(z_src, z_tgt_detached, critic, true, false, false, scale)?;
    Ok((out.loss, grads.d_za.expect("requested source grads")))
}

/// NCE-CLUB upper-bound estimate under the supplied critic: mean positive
/// score minus mean over all i != j negative scores.
pub fn nce_club<T: Real>(
    za: &FactorBatch<T>,
    zb: &FactorBatch<T>,
    critic_star: &Critic<T>,
) -> Result<f64> {
    check_contrastive(za, zb)?;
    let cache = score_cache(za, zb, critic_star)?;
    Ok(club_value(&cache.scores))
}

fn club_value<T: Real>(scores: &Mat<T>) -> f64 {
    let b = scores.rows();
    let mut pos = 0.0;
    let mut neg = 0.0;
    for i in 0..b {
        for j in 0..b {
            if i == j {
                pos += scores.at(i, j).f64();
            } else {
                neg += scores.at(i, j).f64();
            }
        }
    }
    pos / b as f64 - neg / (b as f64 * (b as f64 - 1.0))
}

/// CLUB estimate plus gradients (critic held fixed) scaled by `scale`.
pub fn nce_club_with_grads<T: Real>(
    za: &FactorBatch<T>,
    zb: &FactorBatch<T>,
    critic_star: &Critic<T>,
    want_da: bool,
    want_db: bool,
    scale: f64,
) -> Result<(f64, MiGrads<T>)> {
    check_contrastive(za, zb)?;
    let cache = score_cache(za, zb, critic_star)?;
    let value = club_value(&cache.scores);
    let b = za.batch();
    let pos_w = T::of(scale / b as f64);
    let neg_w = T::of(-scale / (b as f64 * (b as f64 - 1.0)));
    let coeff = Mat::from_fn(b, b, |i, j| if i == j { pos_w } else { neg_w });
    let grads = score_backward(za, zb, critic_star, &cache, &coeff, want_da, want_db, false);
    Ok((value, grads))
}

/// Squared inner product of the unit-normalized pair, with gradients.
/// Returns the contribution; accumulates `scale`-weighted grads when given.
pub fn ortho_pair<T: Real>(
    z_sh: &[T],
    z_uni: &[T],
    scale: f64,
    mut d_sh: Option<&mut [T]>,
    mut d_uni: Option<&mut [T]>,
) -> Result<f64> {
    let ns = crate::mat::norm2(z_sh);
    let nu = crate::mat::norm2(z_uni);
    if ns.f64() < NORM_FLOOR || nu.f64() < NORM_FLOOR {
        return Err(Error::Numeric(
            "zero-norm factor in orthogonality penalty".into(),
        ));
    }
    let inv_s = T::one() / ns;
    let inv_u = T::one() / nu;
    let t = dot(z_sh, z_uni) * inv_s * inv_u;
    let val = (t * t).f64();
    let two_t = T::of(2.0 * scale) * t;
    if let Some(ds) = d_sh.as_deref_mut() {
        // d t / d z_sh = (uhat - t * shat) / |z_sh|
        for c in 0..ds.len() {
            let shat = z_sh[c] * inv_s;
            let uhat = z_uni[c] * inv_u;
            ds[c] += two_t * (uhat - t * shat) * inv_s;
        }
    }
    if let Some(du) = d_uni.as_deref_mut() {
        for c in 0..du.len() {
            let shat = z_sh[c] * inv_s;
            let uhat = z_uni[c] * inv_u;
            du[c] += two_t * (shat - t * uhat) * inv_u;
        }
    }
    Ok(val)
}

/// Orthogonality penalty over a factor set: summed over flows, averaged over
/// layers.
pub fn ortho_penalty<T: Real>(fset: &FactorSet<T>) -> Result<f64> {
    let n_layers = fset.layers.len();
    if n_layers == 0 {
        return Err(Error::Contract("empty factor set".into()));
    }
    let mut total = 0.0;
    for l in 0..n_layers {
        total += ortho_pair(&fset.sh_u[l], &fset.uni_u[l], 1.0, None, None)?;
        total += ortho_pair(&fset.sh_g[l], &fset.uni_g[l], 1.0, None, None)?;
    }
    Ok(total / n_layers as f64)
}
