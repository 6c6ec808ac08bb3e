use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{loss_and_gradient, params_as_bundle_mut, GradientBundle, TransformerParams};
use crate::datagen::LabeledSequenceSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    Gd {
        lr: f64,
    },
    #[serde(rename = "adamw")]
    AdamW {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
        /// Global-norm gradient clipping threshold.
        #[serde(default = "default_clip")]
        clip: Option<f64>,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}

impl Optimizer {
    /// AdamW with `β = (0.9, 0.999)`, no weight decay and clipping at 1.
    pub fn adamw(lr: f64) -> Self {
        Optimizer::AdamW {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
            clip: default_clip(),
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Optimizer::Gd { lr } | Optimizer::AdamW { lr, .. } => lr,
        }
    }
}

/// Multiplier applied to the optimizer's base learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Linear ramp from `start_factor` to 1 over `warmup_steps`, then a
    /// cosine from 1 down to `min_factor` over `decay_steps`, held after.
    WarmupCosine {
        warmup_steps: usize,
        start_factor: f64,
        decay_steps: usize,
        min_factor: f64,
    },
}

impl LrSchedule {
    pub fn factor(&self, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::WarmupCosine {
                warmup_steps,
                start_factor,
                decay_steps,
                min_factor,
            } => {
                if step < warmup_steps {
                    start_factor + (1.0 - start_factor) * step as f64 / warmup_steps as f64
                } else {
                    let k = (step - warmup_steps).min(decay_steps) as f64;
                    let frac = if decay_steps == 0 { 1.0 } else { k / decay_steps as f64 };
                    min_factor + (1.0 - min_factor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
                }
            }
        }
    }
}

/// Probe at every step below `dense_until`, then every `every` steps, and
/// always at the final step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeCadence {
    pub every: usize,
    pub dense_until: usize,
}

impl Default for ProbeCadence {
    fn default() -> Self {
        ProbeCadence {
            every: 10,
            dense_until: 200,
        }
    }
}

impl ProbeCadence {
    pub fn hits(&self, step: usize, last: usize) -> bool {
        step < self.dense_until || step == last || (self.every > 0 && step.is_multiple_of(self.every))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub schedule: LrSchedule,
    pub steps: usize,
    /// Minibatch size; full batch when absent. Batches walk a fresh
    /// permutation each epoch.
    pub batch_size: Option<usize>,
    pub cadence: ProbeCadence,
    pub seed: u64,
}

/// Training-log row, taken at a probed step before that step's update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    /// Loss of the batch used for this step's gradient.
    pub loss: f64,
    pub lr: f64,
    pub grad_norm_attention: f64,
    pub grad_norm_outer: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub records: Vec<TrainRecord>,
    pub final_loss: f64,
}

struct AdamState {
    m: GradientBundle,
    v: GradientBundle,
    t: i32,
}

/// Runs `cfg.steps` optimizer updates. `probe` sees the parameters after
/// `record.step` updates; a final probe follows the last update.
pub fn train<P>(
    set: &LabeledSequenceSet,
    params: &mut TransformerParams,
    cfg: &TrainConfig,
    mut probe: P,
) -> Result<TrainSummary>
where
    P: FnMut(&TrainRecord, &TransformerParams) -> Result<()>,
{
    if !(cfg.optimizer.lr() > 0.0) {
        return Err(Error::Config("learning rate must be positive".into()));
    }
    let n = set.len();
    let batch = cfg.batch_size.unwrap_or(n).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut adam = match cfg.optimizer {
        Optimizer::AdamW { .. } => Some(AdamState {
            m: GradientBundle::zeros_like(params),
            v: GradientBundle::zeros_like(params),
            t: 0,
        }),
        Optimizer::Gd { .. } => None,
    };
    let mut records = Vec::new();

    for step in 0..=cfg.steps {
        let idx: Vec<usize> = if batch == n {
            (0..n).collect()
        } else {
            if cursor + batch > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            cursor += batch;
            order[cursor - batch..cursor].to_vec()
        };
        let (loss, mut grad) = loss_and_gradient(set, params, Some(&idx))?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::DivergedLoss { step });
        }
        let lr = cfg.optimizer.lr() * cfg.schedule.factor(step);
        let record = TrainRecord {
            step,
            loss,
            lr,
            grad_norm_attention: grad.attention_norm(),
            grad_norm_outer: grad.outer_norm(),
        };
        if cfg.cadence.hits(step, cfg.steps) {
            records.push(record);
            probe(&record, params)?;
        }
        if step == cfg.steps {
            return Ok(TrainSummary {
                records,
                final_loss: loss,
            });
        }
        match (cfg.optimizer, adam.as_mut()) {
            (Optimizer::Gd { .. }, _) => {
                for (p, g) in params_as_bundle_mut(params).into_iter().zip(grad.iter()) {
                    *p -= lr * g;
                }
            }
            (
                Optimizer::AdamW {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                    clip,
                    ..
                },
                Some(st),
            ) => {
                if let Some(c) = clip {
                    let norm = grad.global_norm();
                    if norm > c {
                        grad.scale(c / norm);
                    }
                }
                st.t += 1;
                let bc1 = 1.0 - beta1.powi(st.t);
                let bc2 = 1.0 - beta2.powi(st.t);
                let parts = params_as_bundle_mut(params)
                    .into_iter()
                    .zip(grad.iter())
                    .zip(st.m.iter_mut().zip(st.v.iter_mut()));
                for ((p, g), (m, v)) in parts {
                    for (((pi, &gi), mi), vi) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        let update = (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                        *pi -= lr * (update + weight_decay * *pi);
                    }
                }
            }
            (Optimizer::AdamW { .. }, None) => unreachable!("state created with the optimizer"),
        }
    }
    unreachable!("loop returns at the final step")
}

#[cfg(test)]
mod tests {
    use super::super::{backward, init_params, Activation, InitScale};
    use super::*;
    use crate::datagen::{gen_binary, BinaryConfig};

    fn setup() -> (LabeledSequenceSet, TransformerParams) {
        let set = gen_binary(&BinaryConfig {
            n: 8,
            s: 3,
            d_m: 4,
            margin: 0.0,
            seed: 2,
        })
        .unwrap();
        (set, init_params(4, 4, 1, InitScale::Epsilon(0.3), Activation::Tanh, 1).unwrap())
    }

    #[test]
    fn one_gd_step_is_exact() {
        let (set, p0) = setup();
        let g = backward(&set, &p0).unwrap();
        let mut p = p0.clone();
        let cfg = TrainConfig {
            optimizer: Optimizer::Gd { lr: 0.1 },
            schedule: LrSchedule::Constant,
            steps: 1,
            batch_size: None,
            cadence: ProbeCadence::default(),
            seed: 0,
        };
        train(&set, &mut p, &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(p.wq, &p0.wq - 0.1 * &g.wq);
        assert_eq!(p.w2, &p0.w2 - 0.1 * &g.w2);
    }

    #[test]
    fn adamw_defaults() {
        match Optimizer::adamw(1e-3) {
            Optimizer::AdamW {
                beta1,
                beta2,
                weight_decay,
                clip,
                ..
            } => {
                assert_eq!((beta1, beta2, weight_decay, clip), (0.9, 0.999, 0.0, Some(1.0)));
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn adamw_decreases_loss_and_probes_on_cadence() {
        let (set, mut p) = setup();
        let cfg = TrainConfig {
            optimizer: Optimizer::adamw(1e-2),
            schedule: LrSchedule::Constant,
            steps: 300,
            batch_size: Some(4),
            cadence: ProbeCadence {
                every: 50,
                dense_until: 3,
            },
            seed: 0,
        };
        let mut seen = Vec::new();
        let s = train(&set, &mut p, &cfg, |r, _| {
            seen.push(r.step);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![0, 1, 2, 50, 100, 150, 200, 250, 300]);
        assert!(s.final_loss < s.records[0].loss);
    }

    #[test]
    fn warmup_cosine_shape() {
        let s = LrSchedule::WarmupCosine {
            warmup_steps: 10,
            start_factor: 1.0 / 15.0,
            decay_steps: 200,
            min_factor: 1.0 / 15.0,
        };
        assert!((s.factor(0) - 1.0 / 15.0).abs() < 1e-15);
        assert_eq!(s.factor(10), 1.0);
        assert!((s.factor(210) - 1.0 / 15.0).abs() < 1e-15);
        assert!((s.factor(1000) - 1.0 / 15.0).abs() < 1e-15);
        assert!(s.factor(110) < 1.0 && s.factor(110) > 1.0 / 15.0);
    }

    #[test]
    fn diverged_loss_is_reported() {
        let (set, mut p) = setup();
        p.w2 *= 1e6;
        p.wv *= 1e3;
        p.w1 *= 1e3;
        let cfg = TrainConfig {
            optimizer: Optimizer::Gd { lr: 1e6 },
            schedule: LrSchedule::Constant,
            steps: 50,
            batch_size: None,
            cadence: ProbeCadence::default(),
            seed: 0,
        };
        assert!(matches!(train(&set, &mut p, &cfg, |_, _| Ok(())), Err(Error::DivergedLoss { .. })));
    }
}
