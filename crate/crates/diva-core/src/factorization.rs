//! Shared/unique factor encoders: pooled mid-layer states map through a
//! gated 3-layer MLP (or the linear+LN ablation variant) into d_z-dim factor
//! vectors, one shared and one unique encoder per flow, parameters shared
//! across the mid layers.

use crate::backbone::forward::{layer_norm, layer_norm_backward, LnCache};
use crate::backbone::forward::{gelu, gelu_grad};
use crate::error::{Error, Result};
use crate::mat::{affine, affine_backward, Mat};
use crate::real::Real;
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderKind {
    GatedMlp,
    LinearLn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorEncoderParams<T> {
    pub kind: EncoderKind,
    /// Soft gate projection, d -> d_z. Zero init gives a neutral 0.5 gate.
    pub gate_w: Mat<T>,
    pub w1: Mat<T>,
    pub b1: Vec<T>,
    pub w2: Mat<T>,
    pub b2: Vec<T>,
    pub w3: Mat<T>,
    pub b3: Vec<T>,
    pub ln_g: Vec<T>,
    pub ln_b: Vec<T>,
}

impl<T: Real> FactorEncoderParams<T> {
    pub fn init(kind: EncoderKind, d: usize, d_z: usize, rng: &mut Rng) -> Self {
        let s1 = 1.0 / (d as f64).sqrt();
        let s2 = 1.0 / (d_z as f64).sqrt();
        FactorEncoderParams {
            kind,
            gate_w: Mat::zeros(d_z, d),
            w1: Mat::randn(d_z, d, s1, rng),
            b1: vec![T::zero(); d_z],
            w2: Mat::randn(d_z, d_z, s2, rng),
            b2: vec![T::zero(); d_z],
            w3: Mat::randn(d_z, d_z, s2, rng),
            b3: vec![T::zero(); d_z],
            ln_g: vec![T::one(); d_z],
            ln_b: vec![T::zero(); d_z],
        }
    }

    pub fn grad_zeros(&self) -> Self {
        let mut g = self.clone();
        g.gate_w.fill(T::zero());
        g.w1.fill(T::zero());
        g.b1.iter_mut().for_each(|x| *x = T::zero());
        g.w2.fill(T::zero());
        g.b2.iter_mut().for_each(|x| *x = T::zero());
        g.w3.fill(T::zero());
        g.b3.iter_mut().for_each(|x| *x = T::zero());
        g.ln_g.iter_mut().for_each(|x| *x = T::zero());
        g.ln_b.iter_mut().for_each(|x| *x = T::zero());
        g
    }

    pub fn d_in(&self) -> usize {
        self.w1.cols()
    }
    pub fn d_z(&self) -> usize {
        self.w1.rows()
    }

    /// Leaves actually used by the active encoder kind.
    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(&str, &[T])) {
        match self.kind {
            EncoderKind::GatedMlp => {
                f(&format!("{prefix}.gate_w"), self.gate_w.as_slice());
                f(&format!("{prefix}.w1"), self.w1.as_slice());
                f(&format!("{prefix}.b1"), &self.b1);
                f(&format!("{prefix}.w2"), self.w2.as_slice());
                f(&format!("{prefix}.b2"), &self.b2);
                f(&format!("{prefix}.w3"), self.w3.as_slice());
                f(&format!("{prefix}.b3"), &self.b3);
            }
            EncoderKind::LinearLn => {
                f(&format!("{prefix}.w1"), self.w1.as_slice());
                f(&format!("{prefix}.b1"), &self.b1);
            }
        }
        f(&format!("{prefix}.ln_g"), &self.ln_g);
        f(&format!("{prefix}.ln_b"), &self.ln_b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut [T])) {
        match self.kind {
            EncoderKind::GatedMlp => {
                f(&format!("{prefix}.gate_w"), self.gate_w.as_mut_slice());
                f(&format!("{prefix}.w1"), self.w1.as_mut_slice());
                f(&format!("{prefix}.b1"), &mut self.b1);
                f(&format!("{prefix}.w2"), self.w2.as_mut_slice());
                f(&format!("{prefix}.b2"), &mut self.b2);
                f(&format!("{prefix}.w3"), self.w3.as_mut_slice());
                f(&format!("{prefix}.b3"), &mut self.b3);
            }
            EncoderKind::LinearLn => {
                f(&format!("{prefix}.w1"), self.w1.as_mut_slice());
                f(&format!("{prefix}.b1"), &mut self.b1);
            }
        }
        f(&format!("{prefix}.ln_g"), &mut self.ln_g);
        f(&format!("{prefix}.ln_b"), &mut self.ln_b);
    }
}

/// One shared and one unique encoder per flow.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowEncoders<T> {
    pub sh_u: FactorEncoderParams<T>,
    pub uni_u: FactorEncoderParams<T>,
    pub sh_g: FactorEncoderParams<T>,
    pub uni_g: FactorEncoderParams<T>,
}

impl<T: Real> FlowEncoders<T> {
    pub fn init(kind: EncoderKind, d: usize, d_z: usize, rng: &mut Rng) -> Self {
        FlowEncoders {
            sh_u: FactorEncoderParams::init(kind, d, d_z, rng),
            uni_u: FactorEncoderParams::init(kind, d, d_z, rng),
            sh_g: FactorEncoderParams::init(kind, d, d_z, rng),
            uni_g: FactorEncoderParams::init(kind, d, d_z, rng),
        }
    }

    pub fn grad_zeros(&self) -> Self {
        FlowEncoders {
            sh_u: self.sh_u.grad_zeros(),
            uni_u: self.uni_u.grad_zeros(),
            sh_g: self.sh_g.grad_zeros(),
            uni_g: self.uni_g.grad_zeros(),
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(&str, &[T])) {
        self.sh_u.visit("enc.sh_u", f);
        self.uni_u.visit("enc.uni_u", f);
        self.sh_g.visit("enc.sh_g", f);
        self.uni_g.visit("enc.uni_g", f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut [T])) {
        self.sh_u.visit_mut("enc.sh_u", f);
        self.uni_u.visit_mut("enc.uni_u", f);
        self.sh_g.visit_mut("enc.sh_g", f);
        self.uni_g.visit_mut("enc.uni_g", f);
    }

    pub fn leaves(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        for (prefix, e) in [
            ("enc.sh_u", &self.sh_u),
            ("enc.uni_u", &self.uni_u),
            ("enc.sh_g", &self.sh_g),
            ("enc.uni_g", &self.uni_g),
        ] {
            match e.kind {
                EncoderKind::GatedMlp => {
                    out.push((format!("{prefix}.gate_w"), e.gate_w.as_slice()));
                    out.push((format!("{prefix}.w1"), e.w1.as_slice()));
                    out.push((format!("{prefix}.b1"), &e.b1[..]));
                    out.push((format!("{prefix}.w2"), e.w2.as_slice()));
                    out.push((format!("{prefix}.b2"), &e.b2[..]));
                    out.push((format!("{prefix}.w3"), e.w3.as_slice()));
                    out.push((format!("{prefix}.b3"), &e.b3[..]));
                }
                EncoderKind::LinearLn => {
                    out.push((format!("{prefix}.w1"), e.w1.as_slice()));
                    out.push((format!("{prefix}.b1"), &e.b1[..]));
                }
            }
            out.push((format!("{prefix}.ln_g"), &e.ln_g[..]));
            out.push((format!("{prefix}.ln_b"), &e.ln_b[..]));
        }
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out: Vec<(String, &mut [T])> = Vec::new();
        for (prefix, e) in [
            ("enc.sh_u", &mut self.sh_u),
            ("enc.uni_u", &mut self.uni_u),
            ("enc.sh_g", &mut self.sh_g),
            ("enc.uni_g", &mut self.uni_g),
        ] {
            match e.kind {
                EncoderKind::GatedMlp => {
                    out.push((format!("{prefix}.gate_w"), e.gate_w.as_mut_slice()));
                    out.push((format!("{prefix}.w1"), e.w1.as_mut_slice()));
                    out.push((format!("{prefix}.b1"), &mut e.b1[..]));
                    out.push((format!("{prefix}.w2"), e.w2.as_mut_slice()));
                    out.push((format!("{prefix}.b2"), &mut e.b2[..]));
                    out.push((format!("{prefix}.w3"), e.w3.as_mut_slice()));
                    out.push((format!("{prefix}.b3"), &mut e.b3[..]));
                }
                EncoderKind::LinearLn => {
                    out.push((format!("{prefix}.w1"), e.w1.as_mut_slice()));
                    out.push((format!("{prefix}.b1"), &mut e.b1[..]));
                }
            }
            out.push((format!("{prefix}.ln_g"), &mut e.ln_g[..]));
            out.push((format!("{prefix}.ln_b"), &mut e.ln_b[..]));
        }
        out
    }

    /// dst += src, leafwise.
    pub fn add_assign(&mut self, src: &Self) {
        let src_leaves = src.leaves();
        for ((dn, d), (sn, s)) in self.leaves_mut().into_iter().zip(src_leaves) {
            debug_assert_eq!(dn, sn);
            for (x, y) in d.iter_mut().zip(s) {
                *x += *y;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncodeCache<T> {
    pub gate_pre: Vec<T>,
    pub gate: Vec<T>,
    pub h1_pre: Vec<T>,
    pub h1: Vec<T>,
    pub h2_pre: Vec<T>,
    pub h2: Vec<T>,
    pub phi: Vec<T>,
    /// Gated pre-normalization vector m = g (.) phi.
    pub m: Vec<T>,
    pub ln: LnCache<T>,
}

/// Arithmetic mean over token rows.
pub fn pool<T: Real>(h: &Mat<T>) -> Result<Vec<T>> {
    if h.rows() == 0 {
        return Err(Error::Argument("pool over an empty matrix".into()));
    }
    Ok(crate::backbone::forward::pool_rows(h, 0, h.rows()))
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// z = LN(sigma(W h) (.) phi(h)), phi a 3-layer GELU MLP; the LinearLn
/// variant is z = LN(W1 h + b1).
pub fn encode<T: Real>(h: &[T], p: &FactorEncoderParams<T>) -> Result<(Vec<T>, EncodeCache<T>)> {
    if h.len() != p.d_in() {
        return Err(Error::Contract(format!(
            "encoder expects input dim {}, got {}",
            p.d_in(),
            h.len()
        )));
    }
    if h.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite encoder input".into()));
    }
    let d_z = p.d_z();
    let mut h1_pre = vec![T::zero(); d_z];
    affine(&p.w1, &p.b1, h, &mut h1_pre);
    match p.kind {
        EncoderKind::LinearLn => {
            let m = h1_pre.clone();
            let m_mat = Mat::from_vec(1, d_z, m.clone());
            let ln = layer_norm(&m_mat, &p.ln_g, &p.ln_b);
            let z = ln.out.row(0).to_vec();
            Ok((
                z,
                EncodeCache {
                    gate_pre: vec![],
                    gate: vec![],
                    h1_pre,
                    h1: vec![],
                    h2_pre: vec![],
                    h2: vec![],
                    phi: vec![],
                    m,
                    ln,
                },
            ))
        }
        EncoderKind::GatedMlp => {
            let mut gate_pre = vec![T::zero(); d_z];
            for o in 0..d_z {
                gate_pre[o] = crate::mat::dot(p.gate_w.row(o), h);
            }
            let gate: Vec<T> = gate_pre.iter().map(|&x| sigmoid(x)).collect();
            let h1: Vec<T> = h1_pre.iter().map(|&x| gelu(x)).collect();
            let mut h2_pre = vec![T::zero(); d_z];
            affine(&p.w2, &p.b2, &h1, &mut h2_pre);
            let h2: Vec<T> = h2_pre.iter().map(|&x| gelu(x)).collect();
            let mut phi = vec![T::zero(); d_z];
            affine(&p.w3, &p.b3, &h2, &mut phi);
            let m: Vec<T> = gate.iter().zip(&phi).map(|(&g, &f)| g * f).collect();
            let m_mat = Mat::from_vec(1, d_z, m.clone());
            let ln = layer_norm(&m_mat, &p.ln_g, &p.ln_b);
            let z = ln.out.row(0).to_vec();
            Ok((
                z,
                EncodeCache {
                    gate_pre,
                    gate,
                    h1_pre,
                    h1,
                    h2_pre,
                    h2,
                    phi,
                    m,
                    ln,
                },
            ))
        }
    }
}

/// Backward through `encode`; accumulates parameter grads into `g` when
/// given and input grads into `dh` when given.
pub fn encode_backward<T: Real>(
    h: &[T],
    p: &FactorEncoderParams<T>,
    cache: &EncodeCache<T>,
    dz: &[T],
    mut g: Option<&mut FactorEncoderParams<T>>,
    dh: Option<&mut [T]>,
) {
    let d_z = p.d_z();
    let m_mat = Mat::from_vec(1, d_z, cache.m.clone());
    let dz_mat = Mat::from_vec(1, d_z, dz.to_vec());
    let mut dm_mat = Mat::zeros(1, d_z);
    {
        let (dg, db) = match g.as_deref_mut() {
            Some(gp) => (Some(&mut gp.ln_g[..]), Some(&mut gp.ln_b[..])),
            None => (None, None),
        };
        layer_norm_backward(&m_mat, &cache.ln, &p.ln_g, &dz_mat, dg, db, &mut dm_mat);
    }
    let dm = dm_mat.row(0);

    match p.kind {
        EncoderKind::LinearLn => {
            let (dw1, db1) = match g.as_deref_mut() {
                Some(gp) => (Some(&mut gp.w1), Some(&mut gp.b1[..])),
                None => (None, None),
            };
            affine_backward(&p.w1, h, dm, dw1, db1, dh);
        }
        EncoderKind::GatedMlp => {
            // m = gate (.) phi
            let dgate: Vec<T> = dm.iter().zip(&cache.phi).map(|(&d, &f)| d * f).collect();
            let dphi: Vec<T> = dm.iter().zip(&cache.gate).map(|(&d, &gt)| d * gt).collect();

            // phi = w3 h2 + b3
            let mut dh2 = vec![T::zero(); d_z];
            {
                let (dw3, db3) = match g.as_deref_mut() {
                    Some(gp) => (Some(&mut gp.w3), Some(&mut gp.b3[..])),
                    None => (None, None),
                };
                affine_backward(&p.w3, &cache.h2, &dphi, dw3, db3, Some(&mut dh2));
            }
            // h2 = gelu(h2_pre)
            let dh2_pre: Vec<T> = dh2
                .iter()
                .zip(&cache.h2_pre)
                .map(|(&d, &x)| d * gelu_grad(x))
                .collect();
            let mut dh1 = vec![T::zero(); d_z];
            {
                let (dw2, db2) = match g.as_deref_mut() {
                    Some(gp) => (Some(&mut gp.w2), Some(&mut gp.b2[..])),
                    None => (None, None),
                };
                affine_backward(&p.w2, &cache.h1, &dh2_pre, dw2, db2, Some(&mut dh1));
            }
            let dh1_pre: Vec<T> = dh1
                .iter()
                .zip(&cache.h1_pre)
                .map(|(&d, &x)| d * gelu_grad(x))
                .collect();
            let mut dh_local = vec![T::zero(); h.len()];
            {
                let (dw1, db1) = match g.as_deref_mut() {
                    Some(gp) => (Some(&mut gp.w1), Some(&mut gp.b1[..])),
                    None => (None, None),
                };
                affine_backward(&p.w1, h, &dh1_pre, dw1, db1, Some(&mut dh_local));
            }

            // gate = sigmoid(gate_w h)
            let dgate_pre: Vec<T> = dgate
                .iter()
                .zip(&cache.gate)
                .map(|(&d, &s)| d * s * (T::one() - s))
                .collect();
            if let Some(gp) = g.as_deref_mut() {
                for o in 0..d_z {
                    crate::mat::axpy(gp.gate_w.row_mut(o), dgate_pre[o], h);
                }
            }
            for o in 0..d_z {
                crate::mat::axpy(&mut dh_local, dgate_pre[o], p.gate_w.row(o));
            }
            if let Some(dh) = dh {
                crate::mat::axpy(dh, T::one(), &dh_local);
            }
        }
    }
}

/// Factor identifiers: flow U/G, kind shared/unique.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Flow {
    U,
    G,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FactorKind {
    Shared,
    Unique,
}

/// Per-sample factors: z_sh and z_uni for each flow at every mid layer.
#[derive(Debug, Clone)]
pub struct FactorSet<T> {
    pub layers: Vec<usize>,
    /// Indexed [layer][..], aligned with `layers`.
    pub sh_u: Vec<Vec<T>>,
    pub uni_u: Vec<Vec<T>>,
    pub sh_g: Vec<Vec<T>>,
    pub uni_g: Vec<Vec<T>>,
}

impl<T: Real> FactorSet<T> {
    pub fn get(&self, flow: Flow, kind: FactorKind, layer_idx: usize) -> &[T] {
        match (flow, kind) {
            (Flow::U, FactorKind::Shared) => &self.sh_u[layer_idx],
            (Flow::U, FactorKind::Unique) => &self.uni_u[layer_idx],
            (Flow::G, FactorKind::Shared) => &self.sh_g[layer_idx],
            (Flow::G, FactorKind::Unique) => &self.uni_g[layer_idx],
        }
    }
}

/// Pool per-layer states and apply each flow's shared and unique encoders.
/// `states_u` and `states_g` are (layer, image-token state matrix) pairs and
/// must cover identical layer sets.
pub fn factorize<T: Real>(
    states_u: &[(usize, &Mat<T>)],
    states_g: &[(usize, &Mat<T>)],
    encoders: &FlowEncoders<T>,
) -> Result<FactorSet<T>> {
    if states_u.len() != states_g.len()
        || states_u
            .iter()
            .zip(states_g)
            .any(|((lu, _), (lg, _))| lu != lg)
    {
        return Err(Error::Contract(
            "understanding and generation states must cover identical layer sets".into(),
        ));
    }
    let mut fs = FactorSet {
        layers: states_u.iter().map(|(l, _)| *l).collect(),
        sh_u: Vec::new(),
        uni_u: Vec::new(),
        sh_g: Vec::new(),
        uni_g: Vec::new(),
    };
    for ((_, hu), (_, hg)) in states_u.iter().zip(states_g) {
        let pu = pool(hu)?;
        let pg = pool(hg)?;
        fs.sh_u.push(encode(&pu, &encoders.sh_u)?.0);
        fs.uni_u.push(encode(&pu, &encoders.uni_u)?.0);
        fs.sh_g.push(encode(&pg, &encoders.sh_g)?.0);
        fs.uni_g.push(encode(&pg, &encoders.uni_g)?.0);
    }
    Ok(fs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enc(d: usize, d_z: usize, seed: u64) -> FactorEncoderParams<f64> {
        let mut rng = Rng::new(seed);
        FactorEncoderParams::init(EncoderKind::GatedMlp, d, d_z, &mut rng)
    }

    #[test]
    fn pool_basics() {
        let single = Mat::from_vec(1, 3, vec![1.0, -2.0, 0.5]);
        assert_eq!(pool(&single).unwrap(), vec![1.0, -2.0, 0.5]);

        let sym = Mat::from_vec(2, 3, vec![1.0, -2.0, 0.5, -1.0, 2.0, -0.5]);
        let p = pool(&sym).unwrap();
        assert!(p.iter().all(|&x| x.abs() < 1e-15));

        let empty = Mat::<f64>::zeros(0, 3);
        assert!(matches!(pool(&empty), Err(Error::Argument(_))));
    }

    #[test]
    fn pool_matches_direct_summation() {
        let mut rng = Rng::new(7);
        let m = Mat::<f64>::randn(4, 3, 1.0, &mut rng);
        let p = pool(&m).unwrap();
        for c in 0..3 {
            let mut s = 0.0;
            for r in 0..4 {
                s += m.at(r, c);
            }
            assert!((p[c] - s / 4.0).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_gate_weight_reduces_to_ln_of_phi() {
        // W = 0 => g = 0.5 everywhere; LN scale-invariance cancels the gate
        // up to the epsilon in the variance.
        let p = enc(6, 8, 1); // gate_w is zero-initialized
        // sized so the pre-LN variance dominates the LN epsilon
        let h: Vec<f64> = (0..6).map(|i| (i as f64) * 1.5 - 3.5).collect();
        let (z, cache) = encode(&h, &p).unwrap();
        assert!(cache.gate.iter().all(|&g| (g - 0.5).abs() < 1e-15));
        // reference: LN of phi directly
        let phi_mat = Mat::from_vec(1, 8, cache.phi.clone());
        let ln = layer_norm(&phi_mat, &p.ln_g, &p.ln_b);
        for (a, b) in z.iter().zip(ln.out.row(0)) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_phi_gives_ln_offset() {
        let mut p = enc(4, 6, 2);
        p.w3.fill(0.0);
        p.b3.iter_mut().for_each(|x| *x = 0.0);
        p.ln_b = vec![0.25; 6];
        let h = vec![0.3, -0.1, 0.7, 0.2];
        let (z, _) = encode(&h, &p).unwrap();
        // all-zero LN input -> epsilon-stabilized zero, leaving the offset
        for &v in &z {
            assert!((v - 0.25).abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn hand_evaluated_two_dim_chain() {
        let mut p = enc(2, 2, 3);
        // hand-set every parameter
        p.gate_w = Mat::from_vec(2, 2, vec![0.5, -0.25, 0.1, 0.3]);
        p.w1 = Mat::from_vec(2, 2, vec![1.0, 0.5, -0.5, 0.25]);
        p.b1 = vec![0.1, -0.1];
        p.w2 = Mat::from_vec(2, 2, vec![0.7, -0.2, 0.4, 0.6]);
        p.b2 = vec![0.0, 0.05];
        p.w3 = Mat::from_vec(2, 2, vec![0.9, 0.1, -0.3, 0.8]);
        p.b3 = vec![0.02, -0.02];
        p.ln_g = vec![1.5, 0.5];
        p.ln_b = vec![0.1, -0.1];
        let h = vec![0.6, -0.4];

        let (z, _) = encode(&h, &p).unwrap();

        // hand evaluation of the same chain
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let g0 = sig(0.5 * 0.6 + (-0.25) * (-0.4));
        let g1 = sig(0.1 * 0.6 + 0.3 * (-0.4));
        let h1p = [1.0 * 0.6 + 0.5 * (-0.4) + 0.1, -0.5 * 0.6 + 0.25 * (-0.4) - 0.1];
        let h1 = [gelu(h1p[0]), gelu(h1p[1])];
        let h2p = [
            0.7 * h1[0] - 0.2 * h1[1],
            0.4 * h1[0] + 0.6 * h1[1] + 0.05,
        ];
        let h2 = [gelu(h2p[0]), gelu(h2p[1])];
        let phi = [
            0.9 * h2[0] + 0.1 * h2[1] + 0.02,
            -0.3 * h2[0] + 0.8 * h2[1] - 0.02,
        ];
        let m = [g0 * phi[0], g1 * phi[1]];
        let mean = (m[0] + m[1]) / 2.0;
        let var = ((m[0] - mean).powi(2) + (m[1] - mean).powi(2)) / 2.0;
        let rstd = 1.0 / (var + 1e-5).sqrt();
        let hand = [
            1.5 * ((m[0] - mean) * rstd) + 0.1,
            0.5 * ((m[1] - mean) * rstd) - 0.1,
        ];
        assert!((z[0] - hand[0]).abs() < 1e-8, "{} vs {}", z[0], hand[0]);
        assert!((z[1] - hand[1]).abs() < 1e-8, "{} vs {}", z[1], hand[1]);
    }

    #[test]
    fn gate_stays_in_open_unit_interval() {
        let mut rng = Rng::new(5);
        let mut p = enc(8, 8, 4);
        p.gate_w = Mat::randn(8, 8, 0.5, &mut rng);
        for trial in 0..50 {
            let h: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            let (_, cache) = encode(&h, &p).unwrap();
            for &g in &cache.gate {
                assert!(g > 0.0 && g < 1.0, "trial {trial}: gate {g}");
            }
        }
    }

    #[test]
    fn ln_output_is_normalized_pre_affine() {
        let mut rng = Rng::new(6);
        let mut p = enc(16, 8, 7);
        p.w1 = Mat::randn(8, 16, 1.0, &mut rng);
        p.w2 = Mat::randn(8, 8, 1.0, &mut rng);
        p.w3 = Mat::randn(8, 8, 1.0, &mut rng);
        for _ in 0..20 {
            let h: Vec<f64> = (0..16).map(|_| rng.normal() * 2.0).collect();
            let (_, cache) = encode(&h, &p).unwrap();
            // pre-affine normalized vector: (m - mean) * rstd
            let d = cache.m.len();
            let mean0 = cache.ln.mean[0];
            let rstd0 = cache.ln.rstd[0];
            let xhat: Vec<f64> = cache.m.iter().map(|&v| (v - mean0) * rstd0).collect();
            let mu: f64 = xhat.iter().sum::<f64>() / d as f64;
            let var: f64 = xhat.iter().map(|&x| (x - mu).powi(2)).sum::<f64>() / d as f64;
            assert!(mu.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn encode_gradients_match_finite_differences() {
        for kind in [EncoderKind::GatedMlp, EncoderKind::LinearLn] {
            let mut rng = Rng::new(8);
            let mut p = FactorEncoderParams::<f64>::init(kind, 5, 4, &mut rng);
            p.gate_w = Mat::randn(4, 5, 0.5, &mut rng);
            let h: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
            // scalar objective: weighted sum of z
            let w: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let loss = |p: &FactorEncoderParams<f64>, h: &[f64]| -> f64 {
                let (z, _) = encode(h, p).unwrap();
                z.iter().zip(&w).map(|(a, b)| a * b).sum()
            };
            let (_, cache) = encode(&h, &p).unwrap();
            let mut g = p.grad_zeros();
            let mut dh = vec![0.0; 5];
            encode_backward(&h, &p, &cache, &w, Some(&mut g), Some(&mut dh));

            // input grads
            for i in 0..5 {
                let mut hp = h.clone();
                hp[i] += 1e-6;
                let mut hm = h.clone();
                hm[i] -= 1e-6;
                let fd = (loss(&p, &hp) - loss(&p, &hm)) / 2e-6;
                assert!(
                    (dh[i] - fd).abs() / fd.abs().max(dh[i].abs()).max(1e-6) < 1e-4,
                    "dh[{i}] {} vs {}",
                    dh[i],
                    fd
                );
            }
            // a few parameter grads per leaf
            let mut leaves = Vec::new();
            g.visit("e", &mut |n, s| leaves.push((n.to_string(), s.to_vec())));
            for (name, gs) in leaves {
                for idx in [0, gs.len() / 2] {
                    let mut pp = p.clone();
                    pp.visit_mut("e", &mut |n, s| {
                        if n == name {
                            s[idx] += 1e-6;
                        }
                    });
                    let mut pm = p.clone();
                    pm.visit_mut("e", &mut |n, s| {
                        if n == name {
                            s[idx] -= 1e-6;
                        }
                    });
                    let fd = (loss(&pp, &h) - loss(&pm, &h)) / 2e-6;
                    let an = gs[idx];
                    assert!(
                        (an - fd).abs() / fd.abs().max(an.abs()).max(1e-6) < 1e-4,
                        "{name}[{idx}] {an} vs {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn non_finite_input_is_numeric_error() {
        let p = enc(4, 4, 11);
        let h = vec![0.1, f64::NAN, 0.2, 0.3];
        assert!(matches!(encode(&h, &p), Err(Error::Numeric(_))));
    }

    #[test]
    fn factorize_counts_and_parameter_sharing() {
        let mut rng = Rng::new(9);
        let encs = FlowEncoders::<f64>::init(EncoderKind::GatedMlp, 6, 4, &mut rng);
        let mats: Vec<Mat<f64>> = (0..4).map(|i| Mat::randn(3, 6, 1.0 + i as f64 * 0.1, &mut rng)).collect();
        let states_u: Vec<(usize, &Mat<f64>)> = (3..7).zip(mats.iter()).collect();
        let states_g: Vec<(usize, &Mat<f64>)> = (3..7).zip(mats.iter()).collect();
        let fs = factorize(&states_u, &states_g, &encs).unwrap();
        assert_eq!(fs.layers, vec![3, 4, 5, 6]);
        assert_eq!(fs.sh_u.len() + fs.uni_u.len() + fs.sh_g.len() + fs.uni_g.len(), 16);

        // identical states + identical encoder params => equal shared factors
        let mut encs2 = encs.clone();
        encs2.sh_g = encs2.sh_u.clone();
        let fs2 = factorize(&states_u, &states_g, &encs2).unwrap();
        for l in 0..4 {
            for i in 0..4 {
                assert!((fs2.sh_u[l][i] - fs2.sh_g[l][i]).abs() < 1e-15);
            }
        }

        // perturbing layer l' states leaves other layers' factors unchanged
        let mut mats2 = mats.clone();
        mats2[2] = Mat::randn(3, 6, 5.0, &mut rng);
        let states_u2: Vec<(usize, &Mat<f64>)> = (3..7).zip(mats2.iter()).collect();
        let fs3 = factorize(&states_u2, &states_g, &encs).unwrap();
        for l in [0usize, 1, 3] {
            assert_eq!(fs.sh_u[l], fs3.sh_u[l]);
        }
        assert_ne!(fs.sh_u[2], fs3.sh_u[2]);

        // layer-set mismatch is a contract error
        let states_bad: Vec<(usize, &Mat<f64>)> = (4..8).zip(mats.iter()).collect();
        assert!(matches!(
            factorize(&states_bad, &states_g, &encs),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_states_give_encode_of_zero() {
        let mut rng = Rng::new(10);
        let encs = FlowEncoders::<f64>::init(EncoderKind::GatedMlp, 6, 4, &mut rng);
        let z6 = Mat::<f64>::zeros(3, 6);
        let states: Vec<(usize, &Mat<f64>)> = vec![(4, &z6)];
        let fs = factorize(&states, &states, &encs).unwrap();
        let zero_in = vec![0.0; 6];
        assert_eq!(fs.sh_u[0], encode(&zero_in, &encs.sh_u).unwrap().0);
        assert_eq!(fs.uni_g[0], encode(&zero_in, &encs.uni_g).unwrap().0);
    }
}
