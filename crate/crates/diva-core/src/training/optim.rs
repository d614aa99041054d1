//! AdamW with decoupled weight decay, the warmup+cosine learning-rate
//! schedule, and the EMA shadow update.

use crate::error::{Error, Result};
use crate::real::Real;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            peak_lr: 1e-3,
            floor_lr: 1e-5,
            warmup_steps: 200,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub warmup: u64,
    pub total: u64,
    pub peak: f64,
    pub floor: f64,
}

/// Linear warmup 0 -> peak over `warmup` steps, then cosine decay to `floor`
/// at `total`.
pub fn lr_at(step: u64, sched: &LrSchedule) -> f64 {
    if sched.total == 0 {
        return sched.peak;
    }
    if step < sched.warmup {
        return sched.peak * step as f64 / sched.warmup as f64;
    }
    if step >= sched.total {
        return sched.floor;
    }
    let t = (step - sched.warmup) as f64 / (sched.total - sched.warmup) as f64;
    sched.floor + (sched.peak - sched.floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Decoupled weight decay applies to weight matrices and embeddings, not to
/// biases or norm parameters.
pub fn decays(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    matches!(
        leaf,
        "wq" | "wk"
            | "wv"
            | "wo"
            | "w1"
            | "w2"
            | "w3"
            | "w_head"
            | "tok_emb"
            | "pos_emb"
            | "gate_w"
            | "p"
            | "q"
            | "proj"
    )
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub names: Vec<String>,
    pub sizes: Vec<usize>,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
    pub cfg: OptimConfig,
}

impl<T: Real> AdamW<T> {
    /// Register the leaves this optimizer owns, in a stable order.
    pub fn new(leaves: &[(String, usize)], cfg: OptimConfig) -> Self {
        AdamW {
            names: leaves.iter().map(|(n, _)| n.clone()).collect(),
            sizes: leaves.iter().map(|(_, s)| *s).collect(),
            m: leaves.iter().map(|(_, s)| vec![T::zero(); *s]).collect(),
            v: leaves.iter().map(|(_, s)| vec![T::zero(); *s]).collect(),
            t: 0,
            cfg,
        }
    }

    /// One update. `params` and `grads` must be aligned with the registered
    /// leaves (same order, same sizes).
    pub fn step(&mut self, params: &mut [(&str, &mut [T])], grads: &[(&str, &[T])], lr: f64) {
        self.step_masked(params, grads, lr, &|_| true)
    }

    /// Like `step`, but leaves rejected by `active` are skipped entirely
    /// (no moment update, no decay) — used while a schedule holds a
    /// parameter group out of training.
    pub fn step_masked(
        &mut self,
        params: &mut [(&str, &mut [T])],
        grads: &[(&str, &[T])],
        lr: f64,
        active: &dyn Fn(&str) -> bool,
    ) {
        assert_eq!(params.len(), self.names.len(), "optimizer leaf count");
        self.t += 1;
        let b1 = T::of(self.cfg.beta1);
        let b2 = T::of(self.cfg.beta2);
        let one_m_b1 = T::of(1.0 - self.cfg.beta1);
        let one_m_b2 = T::of(1.0 - self.cfg.beta2);
        let bc1 = T::of(1.0 / (1.0 - self.cfg.beta1.powi(self.t as i32)));
        let bc2 = T::of(1.0 / (1.0 - self.cfg.beta2.powi(self.t as i32)));
        let eps = T::of(self.cfg.eps);
        let lr_t = T::of(lr);
        for i in 0..self.names.len() {
            let (pname, p) = &mut params[i];
            let (gname, g) = &grads[i];
            assert_eq!(*pname, self.names[i], "optimizer leaf order");
            assert_eq!(pname, gname);
            if !active(pname) {
                continue;
            }
            let wd = if decays(&self.names[i]) {
                T::of(self.cfg.weight_decay)
            } else {
                T::zero()
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = b1 * m[j] + one_m_b1 * gj;
                v[j] = b2 * v[j] + one_m_b2 * gj * gj;
                let mhat = m[j] * bc1;
                let vhat = v[j] * bc2;
                p[j] -= lr_t * (mhat / (vhat.sqrt() + eps) + wd * p[j]);
            }
        }
    }
}

/// shadow' = decay * shadow + (1 - decay) * live, elementwise.
pub fn ema_update<T: Real>(
    shadow: &mut [(String, Vec<T>)],
    live: &[(String, &[T])],
    decay: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::Contract(format!("EMA decay {decay} outside [0, 1]")));
    }
    if shadow.len() != live.len() {
        return Err(Error::Contract(format!(
            "EMA shadow has {} leaves, live has {}",
            shadow.len(),
            live.len()
        )));
    }
    let d = T::of(decay);
    let om = T::of(1.0 - decay);
    for ((sn, s), (ln, l)) in shadow.iter_mut().zip(live) {
        if sn != ln || s.len() != l.len() {
            return Err(Error::Contract(format!(
                "EMA shadow leaf `{sn}` ({}) does not match live `{ln}` ({})",
                s.len(),
                l.len()
            )));
        }
        for (sv, &lv) in s.iter_mut().zip(l.iter()) {
            *sv = d * *sv + om * lv;
        }
    }
    Ok(())
}

/// decay(step): linear ramp from start to end over the run.
pub fn ema_decay_at(step: u64, total: u64, start: f64, end: f64) -> f64 {
    if total <= 1 {
        return end;
    }
    let t = (step as f64 / (total - 1) as f64).min(1.0);
    start + (end - start) * t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_landmarks() {
        let s = LrSchedule {
            warmup: 100,
            total: 1100,
            peak: 3e-4,
            floor: 1e-5,
        };
        assert_eq!(lr_at(0, &s), 0.0);
        assert!((lr_at(100, &s) - 3e-4).abs() < 1e-18, "peak at warmup end");
        assert_eq!(lr_at(1100, &s), 1e-5, "floor at total");
        assert_eq!(lr_at(5000, &s), 1e-5);
        // midpoint of the decay: floor + (peak - floor)/2
        let mid = lr_at(600, &s);
        let expect = 1e-5 + (3e-4 - 1e-5) * 0.5 * (1.0 + (std::f64::consts::PI * 0.5).cos());
        assert!((mid - expect).abs() < 1e-18);
        assert!((mid - (1e-5 + (3e-4 - 1e-5) / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn lr_monotone_in_phases() {
        let s = LrSchedule {
            warmup: 50,
            total: 500,
            peak: 1e-3,
            floor: 0.0,
        };
        for t in 1..50 {
            assert!(lr_at(t, &s) > lr_at(t - 1, &s));
        }
        for t in 51..500 {
            assert!(lr_at(t, &s) <= lr_at(t - 1, &s));
        }
    }

    #[test]
    fn ema_endpoints() {
        let mut shadow = vec![("a".to_string(), vec![1.0f64, 2.0])];
        let live_data = [3.0f64, 6.0];
        let live = vec![("a".to_string(), &live_data[..])];
        ema_update(&mut shadow, &live, 1.0).unwrap();
        assert_eq!(shadow[0].1, vec![1.0, 2.0], "decay 1 leaves shadow unchanged");
        ema_update(&mut shadow, &live, 0.0).unwrap();
        assert_eq!(shadow[0].1, vec![3.0, 6.0], "decay 0 copies live");
        ema_update(&mut shadow, &live, 0.9).unwrap();
        assert_eq!(shadow[0].1, vec![3.0, 6.0]);

        let wrong = vec![("b".to_string(), &live_data[..])];
        assert!(ema_update(&mut shadow, &wrong, 0.5).is_err());
        assert!(ema_update(&mut shadow, &live, 1.5).is_err());
    }

    #[test]
    fn ema_decay_ramp_endpoints() {
        assert_eq!(ema_decay_at(0, 1000, 0.99, 0.999), 0.99);
        assert_eq!(ema_decay_at(999, 1000, 0.99, 0.999), 0.999);
        let mid = ema_decay_at(500, 1000, 0.99, 0.999);
        assert!(mid > 0.99 && mid < 0.999);
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        // zero grads: params shrink by exactly (1 - lr * wd) on decaying leaves
        let cfg = OptimConfig {
            weight_decay: 0.01,
            ..OptimConfig::default()
        };
        let mut opt = AdamW::<f64>::new(
            &[("layer1.wq".into(), 2), ("layer1.bq".into(), 2)],
            cfg,
        );
        let mut w = vec![1.0f64, -2.0];
        let mut b = vec![1.0f64, -2.0];
        let g = vec![0.0f64; 2];
        let grads: Vec<(&str, &[f64])> = vec![("layer1.wq", &g), ("layer1.bq", &g)];
        {
            let mut params: Vec<(&str, &mut [f64])> =
                vec![("layer1.wq", &mut w), ("layer1.bq", &mut b)];
            opt.step(&mut params, &grads, 0.1);
        }
        assert!((w[0] - 1.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-12);
        assert_eq!(b, vec![1.0, -2.0], "no decay on biases");
    }

    #[test]
    fn decay_mask_names() {
        assert!(decays("layer3.wq"));
        assert!(decays("tok_emb"));
        assert!(decays("readout.a_u.p"));
        assert!(decays("enc.sh_u.gate_w"));
        assert!(decays("critic.proj"));
        assert!(!decays("layer3.bq"));
        assert!(!decays("layer2.ln1_g"));
        assert!(!decays("enc.sh_u.ln_b"));
    }
}
