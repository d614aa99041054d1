//! Backbone parameters, initialization, and named-leaf traversal.
//!
//! Weight matrices are stored row-major as (in x out) so the sequence-level
//! products are plain `X @ W`. The same struct doubles as the gradient
//! container.

use super::BackboneConfig;
use crate::mat::Mat;
use crate::real::Real;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_g: Vec<T>,
    pub ln1_b: Vec<T>,
    pub wq: Mat<T>,
    pub bq: Vec<T>,
    pub wk: Mat<T>,
    pub bk: Vec<T>,
    pub wv: Mat<T>,
    pub bv: Vec<T>,
    pub wo: Mat<T>,
    pub bo: Vec<T>,
    pub ln2_g: Vec<T>,
    pub ln2_b: Vec<T>,
    pub w1: Mat<T>,
    pub b1: Vec<T>,
    pub w2: Mat<T>,
    pub b2: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams<T> {
    pub tok_emb: Mat<T>,
    pub pos_emb: Mat<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_g: Vec<T>,
    pub lnf_b: Vec<T>,
    pub w_head: Mat<T>,
    pub b_head: Vec<T>,
}

impl<T: Real> LayerParams<T> {
    fn zeros(d: usize, dff: usize) -> Self {
        LayerParams {
            ln1_g: vec![T::one(); d],
            ln1_b: vec![T::zero(); d],
            wq: Mat::zeros(d, d),
            bq: vec![T::zero(); d],
            wk: Mat::zeros(d, d),
            bk: vec![T::zero(); d],
            wv: Mat::zeros(d, d),
            bv: vec![T::zero(); d],
            wo: Mat::zeros(d, d),
            bo: vec![T::zero(); d],
            ln2_g: vec![T::one(); d],
            ln2_b: vec![T::zero(); d],
            w1: Mat::zeros(d, dff),
            b1: vec![T::zero(); dff],
            w2: Mat::zeros(dff, d),
            b2: vec![T::zero(); d],
        }
    }

    fn grad_zeros(d: usize, dff: usize) -> Self {
        let mut l = Self::zeros(d, dff);
        l.ln1_g.iter_mut().for_each(|x| *x = T::zero());
        l.ln2_g.iter_mut().for_each(|x| *x = T::zero());
        l
    }
}

impl<T: Real> BackboneParams<T> {
    pub fn init(cfg: &BackboneConfig, rng: &mut Rng) -> Self {
        let d = cfg.width;
        let dff = cfg.ff_width;
        let l = cfg.num_layers;
        // fan-in scale; desk-size widths need louder activations than the
        // large-model convention to leave the near-linear regime
        let std = 1.0 / (d as f64).sqrt();
        // residual branch outputs scaled down with depth, GPT-2 style
        let resid_std = std / (2.0 * l as f64).sqrt();
        let mut layers = Vec::with_capacity(l);
        for _ in 0..l {
            let mut lp = LayerParams::zeros(d, dff);
            lp.wq = Mat::randn(d, d, std, rng);
            lp.wk = Mat::randn(d, d, std, rng);
            lp.wv = Mat::randn(d, d, std, rng);
            lp.wo = Mat::randn(d, d, resid_std, rng);
            lp.w1 = Mat::randn(d, dff, std, rng);
            lp.w2 = Mat::randn(dff, d, resid_std, rng);
            layers.push(lp);
        }
        BackboneParams {
            tok_emb: Mat::randn(cfg.vocab_total(), d, std, rng),
            pos_emb: Mat::randn(cfg.max_seq(), d, std, rng),
            layers,
            lnf_g: vec![T::one(); d],
            lnf_b: vec![T::zero(); d],
            w_head: Mat::randn(d, cfg.logit_cols(), std, rng),
            b_head: vec![T::zero(); cfg.logit_cols()],
        }
    }

    /// Zero-valued gradient container of matching shapes.
    pub fn grad_zeros(cfg: &BackboneConfig) -> Self {
        let d = cfg.width;
        BackboneParams {
            tok_emb: Mat::zeros(cfg.vocab_total(), d),
            pos_emb: Mat::zeros(cfg.max_seq(), d),
            layers: (0..cfg.num_layers)
                .map(|_| LayerParams::grad_zeros(d, cfg.ff_width))
                .collect(),
            lnf_g: vec![T::zero(); d],
            lnf_b: vec![T::zero(); d],
            w_head: Mat::zeros(d, cfg.logit_cols()),
            b_head: vec![T::zero(); cfg.logit_cols()],
        }
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, s| n += s.len());
        n
    }

    /// Visit every leaf as (name, slice), in a stable order. Layer names are
    /// 1-based to match the diagnostic layer indexing.
    pub fn visit(&self, f: &mut impl FnMut(&str, &[T])) {
        f("tok_emb", self.tok_emb.as_slice());
        f("pos_emb", self.pos_emb.as_slice());
        for (i, l) in self.layers.iter().enumerate() {
            let n = i + 1;
            f(&format!("layer{n}.ln1_g"), &l.ln1_g);
            f(&format!("layer{n}.ln1_b"), &l.ln1_b);
            f(&format!("layer{n}.wq"), l.wq.as_slice());
            f(&format!("layer{n}.bq"), &l.bq);
            f(&format!("layer{n}.wk"), l.wk.as_slice());
            f(&format!("layer{n}.bk"), &l.bk);
            f(&format!("layer{n}.wv"), l.wv.as_slice());
            f(&format!("layer{n}.bv"), &l.bv);
            f(&format!("layer{n}.wo"), l.wo.as_slice());
            f(&format!("layer{n}.bo"), &l.bo);
            f(&format!("layer{n}.ln2_g"), &l.ln2_g);
            f(&format!("layer{n}.ln2_b"), &l.ln2_b);
            f(&format!("layer{n}.w1"), l.w1.as_slice());
            f(&format!("layer{n}.b1"), &l.b1);
            f(&format!("layer{n}.w2"), l.w2.as_slice());
            f(&format!("layer{n}.b2"), &l.b2);
        }
        f("lnf_g", &self.lnf_g);
        f("lnf_b", &self.lnf_b);
        f("w_head", self.w_head.as_slice());
        f("b_head", &self.b_head);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut [T])) {
        f("tok_emb", self.tok_emb.as_mut_slice());
        f("pos_emb", self.pos_emb.as_mut_slice());
        for (i, l) in self.layers.iter_mut().enumerate() {
            let n = i + 1;
            f(&format!("layer{n}.ln1_g"), &mut l.ln1_g);
            f(&format!("layer{n}.ln1_b"), &mut l.ln1_b);
            f(&format!("layer{n}.wq"), l.wq.as_mut_slice());
            f(&format!("layer{n}.bq"), &mut l.bq);
            f(&format!("layer{n}.wk"), l.wk.as_mut_slice());
            f(&format!("layer{n}.bk"), &mut l.bk);
            f(&format!("layer{n}.wv"), l.wv.as_mut_slice());
            f(&format!("layer{n}.bv"), &mut l.bv);
            f(&format!("layer{n}.wo"), l.wo.as_mut_slice());
            f(&format!("layer{n}.bo"), &mut l.bo);
            f(&format!("layer{n}.ln2_g"), &mut l.ln2_g);
            f(&format!("layer{n}.ln2_b"), &mut l.ln2_b);
            f(&format!("layer{n}.w1"), l.w1.as_mut_slice());
            f(&format!("layer{n}.b1"), &mut l.b1);
            f(&format!("layer{n}.w2"), l.w2.as_mut_slice());
            f(&format!("layer{n}.b2"), &mut l.b2);
        }
        f("lnf_g", &mut self.lnf_g);
        f("lnf_b", &mut self.lnf_b);
        f("w_head", self.w_head.as_mut_slice());
        f("b_head", &mut self.b_head);
    }

    /// Layer index (1-based) of a leaf name, None for embeddings/head/final LN.
    pub fn leaf_layer(name: &str) -> Option<usize> {
        let rest = name.strip_prefix("layer")?;
        let dot = rest.find('.')?;
        rest[..dot].parse().ok()
    }

    /// Collectable leaf views in visitor order.
    pub fn leaves(&self) -> Vec<(String, &[T])> {
        let mut out: Vec<(String, &[T])> = Vec::with_capacity(6 + 16 * self.layers.len());
        out.push(("tok_emb".into(), self.tok_emb.as_slice()));
        out.push(("pos_emb".into(), self.pos_emb.as_slice()));
        for (i, l) in self.layers.iter().enumerate() {
            let n = i + 1;
            out.push((format!("layer{n}.ln1_g"), &l.ln1_g[..]));
            out.push((format!("layer{n}.ln1_b"), &l.ln1_b[..]));
            out.push((format!("layer{n}.wq"), l.wq.as_slice()));
            out.push((format!("layer{n}.bq"), &l.bq[..]));
            out.push((format!("layer{n}.wk"), l.wk.as_slice()));
            out.push((format!("layer{n}.bk"), &l.bk[..]));
            out.push((format!("layer{n}.wv"), l.wv.as_slice()));
            out.push((format!("layer{n}.bv"), &l.bv[..]));
            out.push((format!("layer{n}.wo"), l.wo.as_slice()));
            out.push((format!("layer{n}.bo"), &l.bo[..]));
            out.push((format!("layer{n}.ln2_g"), &l.ln2_g[..]));
            out.push((format!("layer{n}.ln2_b"), &l.ln2_b[..]));
            out.push((format!("layer{n}.w1"), l.w1.as_slice()));
            out.push((format!("layer{n}.b1"), &l.b1[..]));
            out.push((format!("layer{n}.w2"), l.w2.as_slice()));
            out.push((format!("layer{n}.b2"), &l.b2[..]));
        }
        out.push(("lnf_g".into(), &self.lnf_g[..]));
        out.push(("lnf_b".into(), &self.lnf_b[..]));
        out.push(("w_head".into(), self.w_head.as_slice()));
        out.push(("b_head".into(), &self.b_head[..]));
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out: Vec<(String, &mut [T])> = Vec::with_capacity(6 + 16 * self.layers.len());
        out.push(("tok_emb".into(), self.tok_emb.as_mut_slice()));
        out.push(("pos_emb".into(), self.pos_emb.as_mut_slice()));
        for (i, l) in self.layers.iter_mut().enumerate() {
            let n = i + 1;
            out.push((format!("layer{n}.ln1_g"), &mut l.ln1_g[..]));
            out.push((format!("layer{n}.ln1_b"), &mut l.ln1_b[..]));
            out.push((format!("layer{n}.wq"), l.wq.as_mut_slice()));
            out.push((format!("layer{n}.bq"), &mut l.bq[..]));
            out.push((format!("layer{n}.wk"), l.wk.as_mut_slice()));
            out.push((format!("layer{n}.bk"), &mut l.bk[..]));
            out.push((format!("layer{n}.wv"), l.wv.as_mut_slice()));
            out.push((format!("layer{n}.bv"), &mut l.bv[..]));
            out.push((format!("layer{n}.wo"), l.wo.as_mut_slice()));
            out.push((format!("layer{n}.bo"), &mut l.bo[..]));
            out.push((format!("layer{n}.ln2_g"), &mut l.ln2_g[..]));
            out.push((format!("layer{n}.ln2_b"), &mut l.ln2_b[..]));
            out.push((format!("layer{n}.w1"), l.w1.as_mut_slice()));
            out.push((format!("layer{n}.b1"), &mut l.b1[..]));
            out.push((format!("layer{n}.w2"), l.w2.as_mut_slice()));
            out.push((format!("layer{n}.b2"), &mut l.b2[..]));
        }
        out.push(("lnf_g".into(), &mut self.lnf_g[..]));
        out.push(("lnf_b".into(), &mut self.lnf_b[..]));
        out.push(("w_head".into(), self.w_head.as_mut_slice()));
        out.push(("b_head".into(), &mut self.b_head[..]));
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
