//! Two-stage training orchestration: Stage 1 warms up the factor encoders
//! and low-rank readouts against a frozen backbone; Stage 2 freezes the
//! encoders and refines the backbone's mid layers with the mutual-information
//! objectives; an SFT baseline runs the same loop with every extra term off.

pub mod checkpoint;
pub mod eval;
pub mod optim;
pub mod readout;
pub mod stage1;
pub mod stage2;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use eval::{evaluate, EvalReport};
pub use optim::{ema_decay_at, ema_update, lr_at, AdamW, LrSchedule, OptimConfig};
pub use readout::{inject_logits, LowRank, ReadoutParams};
pub use stage1::run_stage1;
pub use stage2::{run_sft_baseline, run_stage2, run_stage2_until};

use crate::backbone::{BackboneConfig, BackboneParams};
use crate::error::{Error, Result};
use crate::factorization::{EncoderKind, FlowEncoders};
use crate::mi::Critic;
use crate::rng::{stream, Rng};
use crate::synthdata::{DatasetConfig, MaskSpec};
use serde::{Deserialize, Serialize};

pub const TOTAL_BOOKKEEPING_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FactorConfig {
    pub d_z: usize,
    pub rank: usize,
    pub encoder: EncoderKind,
}

impl Default for FactorConfig {
    fn default() -> Self {
        FactorConfig {
            d_z: 64,
            rank: 24,
            encoder: EncoderKind::GatedMlp,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Stage1Config {
    pub steps: u64,
    pub batch_size: usize,
    /// Fraction of steps with shared-only conditioning before the
    /// unique-residual injection turns on.
    pub shared_only_fraction: f64,
    pub lambda_und: f64,
    pub lambda_gen: f64,
    pub lambda_perp: f64,
    pub optim: OptimConfig,
    pub log_interval: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            steps: 4000,
            batch_size: 4,
            shared_only_fraction: 0.3,
            lambda_und: 1.0,
            lambda_gen: 1.0,
            lambda_perp: 0.2,
            optim: OptimConfig {
                peak_lr: 2e-3,
                warmup_steps: 200,
                ..OptimConfig::default()
            },
            log_interval: 50,
        }
    }
}

impl Stage1Config {
    pub fn warm_steps(&self) -> u64 {
        (self.shared_only_fraction * self.steps as f64).round() as u64
    }
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.shared_only_fraction) {
            return Err(Error::config("shared_only_fraction", "must be in [0, 1]"));
        }
        if self.lambda_perp < 0.0 {
            return Err(Error::config("lambda_perp", "must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Stage2Config {
    pub steps: u64,
    pub batch_size: usize,
    pub lambda_sha_max: f64,
    pub lambda_uni_max: f64,
    /// Linear 0 -> max ramp length in steps; both lambdas share it.
    pub ramp_steps: u64,
    /// Trainable layer range (1-based, inclusive); None follows the model's
    /// mid range.
    pub trainable_start: Option<usize>,
    pub trainable_end: Option<usize>,
    pub train_output_head: bool,
    pub ema_decay_start: f64,
    pub ema_decay_end: f64,
    /// Temperature of the cosine alignment critic.
    pub tau: f64,
    pub critic_lr: f64,
    /// Critic InfoNCE ascent steps per training step.
    pub critic_steps: usize,
    pub use_sg: bool,
    pub use_uni: bool,
    pub optim: OptimConfig,
    pub log_interval: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            steps: 8000,
            batch_size: 4,
            lambda_sha_max: 0.6,
            lambda_uni_max: 0.6,
            ramp_steps: 4000,
            trainable_start: None,
            trainable_end: None,
            train_output_head: false,
            ema_decay_start: 0.99,
            ema_decay_end: 0.999,
            tau: 0.1,
            critic_lr: 5e-3,
            critic_steps: 2,
            use_sg: true,
            use_uni: true,
            optim: OptimConfig {
                peak_lr: 1.5e-3,
                warmup_steps: 200,
                ..OptimConfig::default()
            },
            log_interval: 50,
        }
    }
}

impl Stage2Config {
    pub fn trainable_range(&self, model: &BackboneConfig) -> (usize, usize) {
        (
            self.trainable_start.unwrap_or(model.mid_start),
            self.trainable_end.unwrap_or(model.mid_end),
        )
    }

    pub fn lambda_at(&self, step: u64, max: f64) -> f64 {
        if self.ramp_steps == 0 {
            return max;
        }
        max * (step as f64 / self.ramp_steps as f64).min(1.0)
    }

    pub fn validate(&self, model: &BackboneConfig) -> Result<()> {
        let (lo, hi) = self.trainable_range(model);
        if lo < 1 || lo > hi || hi > model.num_layers {
            return Err(Error::config(
                "trainable_range",
                format!(
                    "need 1 <= start <= end <= {}, got [{lo}, {hi}]",
                    model.num_layers
                ),
            ));
        }
        if self.lambda_sha_max < 0.0 || self.lambda_uni_max < 0.0 {
            return Err(Error::config("lambda_max", "must be >= 0"));
        }
        if self.tau <= 0.0 {
            return Err(Error::config("tau", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay_start)
            || !(0.0..=1.0).contains(&self.ema_decay_end)
        {
            return Err(Error::config("ema_decay", "must be in [0, 1]"));
        }
        if self.batch_size < 2 {
            return Err(Error::config(
                "batch_size",
                "contrastive objectives need >= 2",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EvalConfig {
    pub n_eval: usize,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_eval: 256,
            batch_size: 256,
        }
    }
}

/// The whole run configuration; every section has defaults so config files
/// may specify only what they change.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct RunConfig {
    pub data: DatasetConfig,
    pub model: BackboneConfig,
    pub factor: FactorConfig,
    pub mask: MaskSpec,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.mask.validate()?;
        self.stage1.validate()?;
        self.stage2.validate(&self.model)?;
        if self.data.grid_side != self.model.grid_side {
            return Err(Error::config(
                "grid_side",
                format!(
                    "data grid {} and model grid {} must match",
                    self.data.grid_side, self.model.grid_side
                ),
            ));
        }
        if self.data.text_vocab != self.model.text_vocab
            || self.data.visual_vocab != self.model.visual_vocab
        {
            return Err(Error::config(
                "vocab",
                "data and model vocab sizes must match",
            ));
        }
        if self.data.caption_max_len > self.model.caption_max_len {
            return Err(Error::config(
                "caption_max_len",
                "data captions may exceed the model's maximum",
            ));
        }
        if self.factor.d_z == 0 || self.factor.rank == 0 {
            return Err(Error::config("factor", "d_z and rank must be >= 1"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Per-step loss record. `total` always equals
/// lambda_und*l_und + lambda_gen*l_gen + lambda_perp*l_perp
///   + lambda_sha*(l_u2g + l_g2u) + lambda_uni*l_uni_estimate
/// to within 1e-6; stages that do not use a term report it with weight 0.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub stage: String,
    pub l_und: f64,
    pub l_gen: f64,
    pub l_perp: f64,
    pub l_u2g: f64,
    pub l_g2u: f64,
    pub l_uni_estimate: f64,
    pub total: f64,
    pub lambda_und: f64,
    pub lambda_gen: f64,
    pub lambda_perp: f64,
    pub lambda_sha: f64,
    pub lambda_uni: f64,
    pub lr: f64,
}

impl LossReport {
    pub fn weighted_sum(&self) -> f64 {
        self.lambda_und * self.l_und
            + self.lambda_gen * self.l_gen
            + self.lambda_perp * self.l_perp
            + self.lambda_sha * (self.l_u2g + self.l_g2u)
            + self.lambda_uni * self.l_uni_estimate
    }

    pub fn check_bookkeeping(&self) -> Result<()> {
        let d = (self.total - self.weighted_sum()).abs();
        if d > TOTAL_BOOKKEEPING_TOL {
            return Err(Error::Invariant(format!(
                "step {}: reported total {} differs from weighted sum {} by {d}",
                self.step,
                self.total,
                self.weighted_sum()
            )));
        }
        Ok(())
    }
}

/// All learnable state plus optimizer and schedule position. One run owns
/// its state exclusively.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub run: RunConfig,
    pub seed: u64,
    pub stage: String,
    pub step: u64,
    pub backbone: BackboneParams<T>,
    pub encoders: FlowEncoders<T>,
    pub readouts: ReadoutParams<T>,
    pub uni_critic: Critic<T>,
    /// EMA shadow of the stage-2 trainable backbone leaves; empty until
    /// stage 2 starts.
    pub ema: Vec<(String, Vec<T>)>,
    pub opt_enc: AdamW<T>,
    pub opt_bb: AdamW<T>,
    pub opt_critic: AdamW<T>,
}

/// Leaf names of the backbone that stage 2 trains.
pub fn trainable_backbone_leaves<T: crate::real::Real>(
    backbone: &BackboneParams<T>,
    lo: usize,
    hi: usize,
    train_head: bool,
) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    backbone.visit(&mut |name, slice| {
        let in_range = BackboneParams::<T>::leaf_layer(name)
            .map(|l| l >= lo && l <= hi)
            .unwrap_or(false);
        let head = matches!(name, "lnf_g" | "lnf_b" | "w_head" | "b_head");
        if in_range || (train_head && head) {
            out.push((name.to_string(), slice.len()));
        }
    });
    out
}

impl<T: crate::real::Real> TrainState<T> {
    /// Fresh state from a master seed; all init streams derive from it.
    pub fn init(run: &RunConfig, seed: u64) -> Result<Self> {
        run.validate()?;
        let mut rng_bb = Rng::derive(seed, stream::INIT, 0);
        let backbone = BackboneParams::init(&run.model, &mut rng_bb);
        let mut rng_enc = Rng::derive(seed, stream::INIT, 1);
        let encoders = FlowEncoders::init(
            run.factor.encoder,
            run.model.width,
            run.factor.d_z,
            &mut rng_enc,
        );
        let mut rng_ro = Rng::derive(seed, stream::INIT, 2);
        let readouts = ReadoutParams::init(
            run.model.text_vocab as usize,
            run.model.visual_vocab as usize,
            run.factor.d_z,
            run.factor.rank,
            &mut rng_ro,
        )?;
        let mut rng_crit = Rng::derive(seed, stream::INIT, 3);
        let uni_critic = Critic::bilinear(run.factor.d_z, &mut rng_crit);

        let mut enc_leaves = Vec::new();
        encoders.visit(&mut |n, s| enc_leaves.push((n.to_string(), s.len())));
        readouts.visit(&mut |n, s| enc_leaves.push((n.to_string(), s.len())));
        let opt_enc = AdamW::new(&enc_leaves, run.stage1.optim.clone());

        let (lo, hi) = run.stage2.trainable_range(&run.model);
        let bb_leaves =
            trainable_backbone_leaves(&backbone, lo, hi, run.stage2.train_output_head);
        let opt_bb = AdamW::new(&bb_leaves, run.stage2.optim.clone());

        let d_z = run.factor.d_z;
        let opt_critic = AdamW::new(
            &[("critic.proj".to_string(), d_z * d_z)],
            OptimConfig {
                peak_lr: run.stage2.critic_lr,
                floor_lr: run.stage2.critic_lr,
                warmup_steps: 0,
                weight_decay: 0.0,
                ..OptimConfig::default()
            },
        );

        Ok(TrainState {
            run: run.clone(),
            seed,
            stage: "init".to_string(),
            step: 0,
            backbone,
            encoders,
            readouts,
            uni_critic,
            ema: Vec::new(),
            opt_enc,
            opt_bb,
            opt_critic,
        })
    }

    /// Initialize the EMA shadow from the current trainable leaves.
    pub fn init_ema(&mut self) {
        let (lo, hi) = self.run.stage2.trainable_range(&self.run.model);
        let names: std::collections::HashSet<String> = trainable_backbone_leaves(
            &self.backbone,
            lo,
            hi,
            self.run.stage2.train_output_head,
        )
        .into_iter()
        .map(|(n, _)| n)
        .collect();
        let mut shadow = Vec::new();
        self.backbone.visit(&mut |n, s| {
            if names.contains(n) {
                shadow.push((n.to_string(), s.to_vec()));
            }
        });
        self.ema = shadow;
    }

    /// Backbone with trainable leaves replaced by the EMA shadow; everything
    /// else equals the live (frozen) parameters.
    pub fn ema_backbone(&self) -> BackboneParams<T> {
        let mut bb = self.backbone.clone();
        let map: std::collections::HashMap<&str, &Vec<T>> =
            self.ema.iter().map(|(n, v)| (n.as_str(), v)).collect();
        bb.visit_mut(&mut |n, s| {
            if let Some(v) = map.get(n) {
                s.copy_from_slice(v);
            }
        });
        bb
    }

    /// Byte digest of the backbone parameters (freeze-contract checks).
    pub fn backbone_digest(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        self.backbone.visit(&mut |_, s| {
            for x in s {
                let mut b = Vec::with_capacity(8);
                x.write_le(&mut b);
                for byte in b {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        });
        h
    }

    pub fn encoder_digest(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        self.encoders.visit(&mut |_, s| {
            for x in s {
                let mut b = Vec::with_capacity(8);
                x.write_le(&mut b);
                for byte in b {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        });
        h
    }
}

/// Distinct batch sample indices for a step, derived statelessly so runs
/// resume bit-exactly. Tagged by stage so stage transitions reshuffle.
pub fn batch_indices(seed: u64, stage_tag: u64, step: u64, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = Rng::derive(seed, stream::BATCH ^ (stage_tag << 8), step);
    rng.choose_k(n, batch.min(n))
}

/// Per-(step, slot) mask stream.
pub fn mask_rng(seed: u64, stage_tag: u64, step: u64, slot: usize) -> Rng {
    Rng::derive(
        seed ^ stage_tag.rotate_left(17),
        stream::MASK,
        step.wrapping_mul(1024).wrapping_add(slot as u64),
    )
}

pub const STAGE1_TAG: u64 = 1;
pub const STAGE2_TAG: u64 = 2;
pub const SFT_TAG: u64 = 3;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_toml_roundtrip_and_defaults() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
        // partial configs inherit defaults
        let partial = RunConfig::from_toml("[stage1]\nsteps = 7\n").unwrap();
        assert_eq!(partial.stage1.steps, 7);
        assert_eq!(partial.stage2.steps, RunConfig::default().stage2.steps);
        // invalid values surface the field name
        let bad = RunConfig::from_toml("[data]\ngrid_side = 1\n");
        assert!(matches!(bad, Err(Error::Config { .. })));
    }

    #[test]
    fn lambda_ramp_shape() {
        let cfg = Stage2Config::default();
        assert_eq!(cfg.lambda_at(0, 0.6), 0.0);
        assert_eq!(cfg.lambda_at(cfg.ramp_steps, 0.6), 0.6);
        assert_eq!(cfg.lambda_at(cfg.ramp_steps * 3, 0.6), 0.6);
        let mid = cfg.lambda_at(cfg.ramp_steps / 2, 0.6);
        assert!((mid - 0.3).abs() < 1e-12);
        // monotone, clamped
        let mut prev = -1.0;
        for s in (0..cfg.steps).step_by(97) {
            let l = cfg.lambda_at(s, 0.6);
            assert!(l >= prev && l <= 0.6);
            prev = l;
        }
    }

    #[test]
    fn loss_report_bookkeeping() {
        let mut r = LossReport {
            step: 3,
            stage: "stage2".into(),
            l_und: 1.5,
            l_gen: 2.0,
            l_perp: 0.1,
            l_u2g: 0.6,
            l_g2u: 0.7,
            l_uni_estimate: -0.05,
            total: 0.0,
            lambda_und: 1.0,
            lambda_gen: 1.0,
            lambda_perp: 0.0,
            lambda_sha: 0.3,
            lambda_uni: 0.15,
            lr: 1e-4,
        };
        r.total = r.weighted_sum();
        r.check_bookkeeping().unwrap();
        r.total += 1e-3;
        assert!(r.check_bookkeeping().is_err());
    }

    #[test]
    fn batch_indices_distinct_and_stable() {
        let a = batch_indices(5, STAGE2_TAG, 10, 64, 8);
        let b = batch_indices(5, STAGE2_TAG, 10, 64, 8);
        assert_eq!(a, b);
        let c = batch_indices(5, STAGE2_TAG, 11, 64, 8);
        assert_ne!(a, c);
        let mut s = a.clone();
        s.dedup();
        assert_eq!(s.len(), 8);
    }

    #[test]
    fn trainable_leaves_follow_range() {
        let run = RunConfig::default();
        let st = TrainState::<f32>::init(&run, 1).unwrap();
        let leaves = trainable_backbone_leaves(&st.backbone, 4, 6, false);
        assert!(leaves.iter().all(|(n, _)| {
            BackboneParams::<f32>::leaf_layer(n)
                .map(|l| (4..=6).contains(&l))
                .unwrap_or(false)
        }));
        assert_eq!(leaves.len(), 3 * 16);
        let with_head = trainable_backbone_leaves(&st.backbone, 4, 6, true);
        assert_eq!(with_head.len(), 3 * 16 + 4);
    }

    #[test]
    fn parameter_budget_fits_desk_scale() {
        let run = RunConfig::default();
        let st = TrainState::<f32>::init(&run, 0).unwrap();
        let mut total = st.backbone.n_params();
        st.encoders.visit(&mut |_, s| total += s.len());
        st.readouts.visit(&mut |_, s| total += s.len());
        total += st.uni_critic.proj.as_ref().unwrap().as_slice().len();
        assert!(total <= 3_000_000, "default config holds {total} parameters");
    }

    #[test]
    fn ema_backbone_merges_shadow() {
        let run = RunConfig::default();
        let mut st = TrainState::<f32>::init(&run, 2).unwrap();
        st.init_ema();
        assert!(!st.ema.is_empty());
        // shadow initially equals live
        let merged = st.ema_backbone();
        assert_eq!(merged, st.backbone);
        // perturb shadow; merged backbone picks it up only on trainable leaves
        st.ema[0].1[0] += 1.0;
        let merged = st.ema_backbone();
        assert_ne!(merged, st.backbone);
    }
}
