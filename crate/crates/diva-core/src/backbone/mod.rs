//! Miniature shared-transformer unified model: one joint embedding table and
//! output head over text + visual vocab, prefix-LM attention (causal over
//! text, bidirectional within the image-token block), pre-norm blocks.
//!
//! Both task flows of the trainer are materialized here as `FlowInstance`s:
//! captioning (understanding) and masked image-token reconstruction
//! (generation).

mod backward;
pub mod forward;
mod params;

pub use backward::{backward, BackwardOpts};
pub use forward::{
    forward, forward_cached, forward_from_layer, forward_prefix, gelu, gelu_grad, layer_norm,
    layer_norm_backward, mid_pooled_states, pool_rows, FwdCache, LnCache,
};
pub use params::{BackboneParams, LayerParams};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::real::Real;
use crate::synthdata::{apply_mask, Mask, PairedSample};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct BackboneConfig {
    pub num_layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub text_vocab: u32,
    pub visual_vocab: u32,
    pub grid_side: usize,
    pub caption_max_len: usize,
    pub prompt_len: usize,
    /// Inclusive 1-based mid-layer interval targeted by factorization.
    pub mid_start: usize,
    pub mid_end: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        // ceil(L/3)+1 .. ceil(2L/3) for L=8 gives the middle third [4, 6]
        BackboneConfig {
            num_layers: 8,
            width: 128,
            heads: 4,
            ff_width: 256,
            text_vocab: 64,
            visual_vocab: 64,
            grid_side: 8,
            caption_max_len: 8,
            prompt_len: 4,
            mid_start: 4,
            mid_end: 6,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::config("num_layers", "must be >= 1"));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::config(
                "width",
                format!("width {} must be divisible by heads {}", self.width, self.heads),
            ));
        }
        if self.ff_width == 0 {
            return Err(Error::config("ff_width", "must be >= 1"));
        }
        if self.mid_start < 1 || self.mid_start > self.mid_end || self.mid_end > self.num_layers {
            return Err(Error::config(
                "mid_range",
                format!(
                    "need 1 <= mid_start <= mid_end <= {}, got [{}, {}]",
                    self.num_layers, self.mid_start, self.mid_end
                ),
            ));
        }
        if self.grid_side < 2 {
            return Err(Error::config("grid_side", "must be >= 2"));
        }
        if self.prompt_len == 0 || self.prompt_len > self.text_vocab as usize {
            return Err(Error::config("prompt_len", "must be in [1, text_vocab]"));
        }
        if self.caption_max_len < 1 {
            return Err(Error::config("caption_max_len", "must be >= 1"));
        }
        Ok(())
    }

    pub fn n_image_tokens(&self) -> usize {
        self.grid_side * self.grid_side
    }

    /// Joint token-id space: text, then visual, then the special tokens.
    pub fn joint_text(&self, t: u32) -> u32 {
        t
    }
    pub fn joint_visual(&self, v: u32) -> u32 {
        self.text_vocab + v
    }
    pub fn bos(&self) -> u32 {
        self.text_vocab + self.visual_vocab
    }
    pub fn boi(&self) -> u32 {
        self.text_vocab + self.visual_vocab + 1
    }
    pub fn eoi(&self) -> u32 {
        self.text_vocab + self.visual_vocab + 2
    }
    pub fn mask_token(&self) -> u32 {
        self.text_vocab + self.visual_vocab + 3
    }
    pub fn pad(&self) -> u32 {
        self.text_vocab + self.visual_vocab + 4
    }
    pub fn vocab_total(&self) -> usize {
        (self.text_vocab + self.visual_vocab) as usize + 5
    }
    /// Output head covers text + visual columns (no specials).
    pub fn logit_cols(&self) -> usize {
        (self.text_vocab + self.visual_vocab) as usize
    }
    pub fn text_slice(&self) -> (usize, usize) {
        (0, self.text_vocab as usize)
    }
    pub fn visual_slice(&self) -> (usize, usize) {
        (self.text_vocab as usize, self.visual_vocab as usize)
    }

    /// Fixed captioning prompt: the last `prompt_len` text-vocab ids.
    pub fn prompt_tokens(&self) -> Vec<u32> {
        (0..self.prompt_len)
            .map(|i| self.text_vocab - self.prompt_len as u32 + i as u32)
            .collect()
    }

    pub fn und_seq_len(&self, caption_len: usize) -> usize {
        2 + self.n_image_tokens() + 1 + self.prompt_len + caption_len
    }
    pub fn gen_seq_len(&self, caption_len: usize) -> usize {
        1 + caption_len + 1 + self.n_image_tokens()
    }
    pub fn max_seq(&self) -> usize {
        self.und_seq_len(self.caption_max_len)
            .max(self.gen_seq_len(self.caption_max_len))
    }

    pub fn mid_layers(&self) -> std::ops::RangeInclusive<usize> {
        self.mid_start..=self.mid_end
    }
    pub fn n_mid_layers(&self) -> usize {
        self.mid_end - self.mid_start + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlowKind {
    Understanding,
    Generation,
}

/// Prefix-LM visibility: position i may attend to j iff j is not PAD and
/// (j <= i, or both i and j are inside the image-token block).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionSpec {
    pub image_start: usize,
    pub image_len: usize,
}

impl AttentionSpec {
    #[inline]
    pub fn in_image(&self, i: usize) -> bool {
        i >= self.image_start && i < self.image_start + self.image_len
    }
    #[inline]
    pub fn allows(&self, i: usize, j: usize, pad: &[bool]) -> bool {
        !pad[j] && (j <= i || (self.in_image(i) && self.in_image(j)))
    }
    /// Ignoring PAD, the keys visible to query i form the contiguous range
    /// [0, hi): causal order for text, the whole block for image queries.
    #[inline]
    pub fn allowed_hi(&self, i: usize) -> usize {
        if self.in_image(i) {
            self.image_start + self.image_len
        } else {
            i + 1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowInstance {
    pub flow_kind: FlowKind,
    /// Joint-vocab token ids.
    pub input_tokens: Vec<u32>,
    pub attn: AttentionSpec,
    pub target_positions: Vec<usize>,
    /// Flow-local vocab values aligned with `target_positions`.
    pub target_tokens: Vec<u32>,
    pub source_sample_id: usize,
}

impl FlowInstance {
    pub fn seq_len(&self) -> usize {
        self.input_tokens.len()
    }
    pub fn image_positions(&self) -> Vec<usize> {
        (self.attn.image_start..self.attn.image_start + self.attn.image_len).collect()
    }
    pub fn pad_mask(&self, pad_id: u32) -> Vec<bool> {
        self.input_tokens.iter().map(|&t| t == pad_id).collect()
    }
}

/// Backbone outputs: full logit matrix plus per-layer hidden states at the
/// image-token positions.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    pub logits: Mat<T>,
    /// hidden[l-1] is layer l's block output restricted to image positions.
    pub hidden: Vec<Mat<T>>,
}

/// Captioning flow: [BOS, BOI, image, EOI, prompt, caption], teacher-forced
/// next-token targets over the caption.
pub fn build_und_flow(
    sample: &PairedSample,
    sample_id: usize,
    cfg: &BackboneConfig,
) -> Result<FlowInstance> {
    if sample.caption_tokens.is_empty() {
        return Err(Error::Input("caption is empty".into()));
    }
    if sample.caption_tokens.len() > cfg.caption_max_len {
        return Err(Error::Input(format!(
            "caption length {} exceeds max {}",
            sample.caption_tokens.len(),
            cfg.caption_max_len
        )));
    }
    let n = cfg.n_image_tokens();
    if sample.image_tokens.len() != n {
        return Err(Error::Input(format!(
            "image has {} tokens, expected {}",
            sample.image_tokens.len(),
            n
        )));
    }
    let mut input = Vec::with_capacity(cfg.und_seq_len(sample.caption_tokens.len()));
    input.push(cfg.bos());
    input.push(cfg.boi());
    let image_start = input.len();
    input.extend(sample.image_tokens.iter().map(|&v| cfg.joint_visual(v)));
    input.push(cfg.eoi());
    input.extend(cfg.prompt_tokens());
    let caption_start = input.len();
    input.extend(sample.caption_tokens.iter().map(|&t| cfg.joint_text(t)));
    // position p-1 predicts the caption token at position p
    let target_positions: Vec<usize> = (0..sample.caption_tokens.len())
        .map(|k| caption_start + k - 1)
        .collect();
    Ok(FlowInstance {
        flow_kind: FlowKind::Understanding,
        input_tokens: input,
        attn: AttentionSpec {
            image_start,
            image_len: n,
        },
        target_positions,
        target_tokens: sample.caption_tokens.clone(),
        source_sample_id: sample_id,
    })
}

/// Reconstruction flow: [BOS, caption, BOI, masked image], mask-predict
/// targets at the masked cells only.
pub fn build_gen_flow(
    sample: &PairedSample,
    mask: &Mask,
    sample_id: usize,
    cfg: &BackboneConfig,
) -> Result<FlowInstance> {
    let n = cfg.n_image_tokens();
    if mask.grid_side != cfg.grid_side || mask.cells.len() != n {
        return Err(Error::Argument(format!(
            "mask grid {}x{} does not match config grid {}x{}",
            mask.grid_side, mask.grid_side, cfg.grid_side, cfg.grid_side
        )));
    }
    if sample.image_tokens.len() != n {
        return Err(Error::Input(format!(
            "image has {} tokens, expected {}",
            sample.image_tokens.len(),
            n
        )));
    }
    if sample.caption_tokens.is_empty() || sample.caption_tokens.len() > cfg.caption_max_len {
        return Err(Error::Input("caption empty or over-long".into()));
    }
    let masked = apply_mask(&sample.image_tokens, mask, u32::MAX)?;
    let mut input = Vec::with_capacity(cfg.gen_seq_len(sample.caption_tokens.len()));
    input.push(cfg.bos());
    input.extend(sample.caption_tokens.iter().map(|&t| cfg.joint_text(t)));
    input.push(cfg.boi());
    let image_start = input.len();
    input.extend(
        masked
            .iter()
            .map(|&v| if v == u32::MAX { cfg.mask_token() } else { cfg.joint_visual(v) }),
    );
    let mut target_positions = Vec::new();
    let mut target_tokens = Vec::new();
    for (cell, &m) in mask.cells.iter().enumerate() {
        if m {
            target_positions.push(image_start + cell);
            target_tokens.push(sample.image_tokens[cell]);
        }
    }
    Ok(FlowInstance {
        flow_kind: FlowKind::Generation,
        input_tokens: input,
        attn: AttentionSpec {
            image_start,
            image_len: n,
        },
        target_positions,
        target_tokens,
        source_sample_id: sample_id,
    })
}

/// Mean cross-entropy over target positions within a logit column slice.
/// Returns 0 for empty targets.
pub fn ce_mean<T: Real>(
    logits: &Mat<T>,
    positions: &[usize],
    targets: &[u32],
    col_off: usize,
    col_len: usize,
) -> f64 {
    if positions.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (&p, &t) in positions.iter().zip(targets) {
        let row = &logits.row(p)[col_off..col_off + col_len];
        let mut m = row[0];
        for &x in row.iter() {
            m = m.maxv(x);
        }
        let mut se = T::zero();
        for &x in row.iter() {
            se += (x - m).exp();
        }
        let lse = m + se.ln();
        total += (lse - row[t as usize]).f64();
    }
    total / positions.len() as f64
}

/// d(mean CE)/d(logits), scaled by `weight`, accumulated into `dlogits`.
pub fn ce_mean_backward<T: Real>(
    logits: &Mat<T>,
    positions: &[usize],
    targets: &[u32],
    col_off: usize,
    col_len: usize,
    weight: f64,
    dlogits: &mut Mat<T>,
) {
    if positions.is_empty() {
        return;
    }
    let w = T::of(weight / positions.len() as f64);
    for (&p, &t) in positions.iter().zip(targets) {
        let row = &logits.row(p)[col_off..col_off + col_len];
        let mut m = row[0];
        for &x in row.iter() {
            m = m.maxv(x);
        }
        let mut se = T::zero();
        for &x in row.iter() {
            se += (x - m).exp();
        }
        let drow = &mut dlogits.row_mut(p)[col_off..col_off + col_len];
        for (i, &x) in row.iter().enumerate() {
            let soft = (x - m).exp() / se;
            drow[i] += w * (soft - if i == t as usize { T::one() } else { T::zero() });
        }
    }
}

pub fn und_loss<T: Real>(
    trace: &ForwardTrace<T>,
    inst: &FlowInstance,
    cfg: &BackboneConfig,
) -> Result<f64> {
    if inst.flow_kind != FlowKind::Understanding {
        return Err(Error::Contract(
            "und_loss requires an understanding-flow instance".into(),
        ));
    }
    let (off, len) = cfg.text_slice();
    Ok(ce_mean(
        &trace.logits,
        &inst.target_positions,
        &inst.target_tokens,
        off,
        len,
    ))
}

pub fn gen_loss<T: Real>(
    trace: &ForwardTrace<T>,
    inst: &FlowInstance,
    cfg: &BackboneConfig,
) -> Result<f64> {
    if inst.flow_kind != FlowKind::Generation {
        return Err(Error::Contract(
            "gen_loss requires a generation-flow instance".into(),
        ));
    }
    let (off, len) = cfg.visual_slice();
    Ok(ce_mean(
        &trace.logits,
        &inst.target_positions,
        &inst.target_tokens,
        off,
        len,
    ))
}

/// Slice the per-layer hidden states down to the configured mid range.
pub fn collect_mid_states<'a, T: Real>(
    trace: &'a ForwardTrace<T>,
    mid_range: (usize, usize),
) -> Result<Vec<(usize, &'a Mat<T>)>> {
    let (a, b) = mid_range;
    if a < 1 || a > b || b > trace.hidden.len() {
        return Err(Error::config(
            "mid_range",
            format!(
                "need 1 <= start <= end <= {}, got [{a}, {b}]",
                trace.hidden.len()
            ),
        ));
    }
    Ok((a..=b).map(|l| (l, &trace.hidden[l - 1])).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::synthdata::{generate_dataset, DatasetConfig, Mask, MaskPattern, MaskSpec};
    use crate::rng::Rng;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            num_layers: 2,
            width: 8,
            heads: 2,
            ff_width: 16,
            grid_side: 4,
            mid_start: 1,
            mid_end: 2,
            ..BackboneConfig::default()
        }
    }

    fn data_cfg() -> DatasetConfig {
        DatasetConfig {
            n_samples: 4,
            grid_side: 4,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn und_flow_layout() {
        let cfg = tiny_cfg();
        let ds = generate_dataset(&data_cfg(), 5).unwrap();
        let f = build_und_flow(&ds[0], 0, &cfg).unwrap();
        assert_eq!(f.flow_kind, FlowKind::Understanding);
        assert_eq!(f.target_positions.len(), ds[0].caption_tokens.len());
        assert_eq!(f.input_tokens[0], cfg.bos());
        assert_eq!(f.input_tokens[1], cfg.boi());
        assert_eq!(f.attn.image_start, 2);
        assert_eq!(f.input_tokens[2 + 16], cfg.eoi());
        // round-trip: targets decode to the caption
        let decoded: Vec<u32> = f.target_tokens.clone();
        assert_eq!(decoded, ds[0].caption_tokens);
        for (k, &p) in f.target_positions.iter().enumerate() {
            // position p holds the token preceding caption[k]
            if k > 0 {
                assert_eq!(f.input_tokens[p], cfg.joint_text(ds[0].caption_tokens[k - 1]));
            }
        }
    }

    #[test]
    fn und_flow_prefix_identical_for_equal_images() {
        let cfg = tiny_cfg();
        let ds = generate_dataset(&data_cfg(), 5).unwrap();
        let mut s2 = ds[0].clone();
        s2.caption_tokens = vec![1, 2, 3, 12, 13];
        let f1 = build_und_flow(&ds[0], 0, &cfg).unwrap();
        let f2 = build_und_flow(&s2, 1, &cfg).unwrap();
        let prefix = 2 + 16 + 1 + cfg.prompt_len;
        assert_eq!(f1.input_tokens[..prefix], f2.input_tokens[..prefix]);
    }

    #[test]
    fn gen_flow_targets_are_masked_cells() {
        let cfg = tiny_cfg();
        let ds = generate_dataset(&data_cfg(), 5).unwrap();
        let mut rng = Rng::new(2);
        let spec = MaskSpec {
            ratio_min: 0.5,
            ratio_max: 0.5,
            pattern: MaskPattern::Random,
        };
        let mask = crate::synthdata::sample_mask(&spec, 4, &mut rng).unwrap();
        let f = build_gen_flow(&ds[0], &mask, 0, &cfg).unwrap();
        assert_eq!(f.flow_kind, FlowKind::Generation);
        assert_eq!(f.target_positions.len(), mask.popcount());
        for (k, &p) in f.target_positions.iter().enumerate() {
            assert_eq!(f.input_tokens[p], cfg.mask_token());
            let cell = p - f.attn.image_start;
            assert_eq!(f.target_tokens[k], ds[0].image_tokens[cell]);
        }
        // empty mask -> no targets
        let f0 = build_gen_flow(&ds[0], &Mask::none(4), 0, &cfg).unwrap();
        assert!(f0.target_positions.is_empty());
        // wrong shape -> argument error
        assert!(matches!(
            build_gen_flow(&ds[0], &Mask::none(5), 0, &cfg),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn ce_uniform_and_onehot() {
        let cfg = tiny_cfg();
        let seq = 3;
        let mut logits = Mat::<f64>::zeros(seq, cfg.logit_cols());
        // uniform logits -> ln V_t
        let loss = ce_mean(&logits, &[1, 2], &[0, 5], 0, 64);
        assert!((loss - 64f64.ln()).abs() < 1e-12);
        // high-margin one-hot -> ~0
        for (p, t) in [(1usize, 0u32), (2, 5)] {
            logits.row_mut(p)[t as usize] = 30.0;
        }
        let loss2 = ce_mean(&logits, &[1, 2], &[0, 5], 0, 64);
        assert!(loss2 <= 1e-6, "margin-30 loss {loss2}");
    }

    #[test]
    fn ce_hand_computed_three_class() {
        // 2 targets over a hand-set 3-class slice
        let mut logits = Mat::<f64>::zeros(2, 3);
        logits.row_mut(0).copy_from_slice(&[1.0, 2.0, -1.0]);
        logits.row_mut(1).copy_from_slice(&[0.5, 0.0, 0.25]);
        let loss = ce_mean(&logits, &[0, 1], &[1, 2], 0, 3);
        let lse0 = (1f64.exp() + 2f64.exp() + (-1f64).exp()).ln();
        let lse1 = (0.5f64.exp() + 1.0 + 0.25f64.exp()).ln();
        let hand = ((lse0 - 2.0) + (lse1 - 0.25)) / 2.0;
        assert!((loss - hand).abs() < 1e-8, "{loss} vs {hand}");
    }

    #[test]
    fn loss_flow_kind_contracts_and_empty_mask() {
        let cfg = tiny_cfg();
        let ds = generate_dataset(&data_cfg(), 5).unwrap();
        let mut rng = Rng::new(1);
        let params = crate::backbone::BackboneParams::<f64>::init(&cfg, &mut rng);
        let und = build_und_flow(&ds[0], 0, &cfg).unwrap();
        let gen = build_gen_flow(&ds[0], &Mask::none(4), 0, &cfg).unwrap();
        let t_und = forward(&params, &cfg, &und).unwrap();
        let t_gen = forward(&params, &cfg, &gen).unwrap();
        // wrong flow kind is a contract error
        assert!(matches!(und_loss(&t_gen, &gen, &cfg), Err(Error::Contract(_))));
        assert!(matches!(gen_loss(&t_und, &und, &cfg), Err(Error::Contract(_))));
        // all-false mask: zero target positions, zero loss contribution
        assert_eq!(gen_loss(&t_gen, &gen, &cfg).unwrap(), 0.0);
        // uniform logits over the visual slice -> ln V_v
        let mut t = t_gen.clone();
        t.logits.fill(0.25);
        let mut rng2 = Rng::new(2);
        let mask = crate::synthdata::sample_mask(
            &MaskSpec { ratio_min: 0.5, ratio_max: 0.5, pattern: MaskPattern::Random },
            4,
            &mut rng2,
        )
        .unwrap();
        let gen2 = build_gen_flow(&ds[0], &mask, 0, &cfg).unwrap();
        let t2 = ForwardTrace::<f64> {
            logits: Mat::from_fn(gen2.seq_len(), cfg.logit_cols(), |_, _| 0.25),
            hidden: vec![],
        };
        let l = gen_loss(&t2, &gen2, &cfg).unwrap();
        assert!((l - 64f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mid_states_slicing() {
        let cfg = BackboneConfig::default();
        let trace = ForwardTrace::<f64> {
            logits: Mat::zeros(1, cfg.logit_cols()),
            hidden: (0..8).map(|l| Mat::from_fn(2, 2, |r, c| (l * 4 + r * 2 + c) as f64)).collect(),
        };
        let mids = collect_mid_states(&trace, (3, 6)).unwrap();
        assert_eq!(mids.len(), 4);
        assert_eq!(mids[0].0, 3);
        assert_eq!(mids[3].0, 6);
        // aliases the trace content exactly
        assert_eq!(mids[1].1.as_slice(), trace.hidden[3].as_slice());
        let all = collect_mid_states(&trace, (1, 8)).unwrap();
        assert_eq!(all.len(), 8);
        assert!(matches!(
            collect_mid_states(&trace, (5, 3)),
            Err(Error::Config { .. })
        ));
    }
}
