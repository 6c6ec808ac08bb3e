use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Scenario;
use crate::datagen::AnchorConfig;
use crate::effective::IntegrateConfig;
use crate::error::{Error, Result};
use crate::metrics::StageConfig;
use crate::transformer::{Activation, InitScale, LrSchedule, Optimizer, ProbeCadence};

/// A run description, read from TOML. Sub-tables a scenario does not use
/// are ignored; the ones it needs must be present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integrator: Option<IntegrateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<Optimizer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<LrSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kq: Option<KqConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taylor: Option<TaylorConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validate: Option<ValidateConfig>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_m: usize,
    /// Defaults to `d_m`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_ff: Option<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Initialization std (theory mode); exclusive with `gamma`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    /// Initialization std `d_m^{-gamma}`; exclusive with `epsilon`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl ModelConfig {
    pub fn d_ff(&self) -> usize {
        self.d_ff.unwrap_or(self.d_m)
    }

    pub fn init_scale(&self) -> Result<InitScale> {
        let scale = match (self.epsilon, self.gamma) {
            (Some(e), None) => InitScale::Epsilon(e),
            (None, Some(g)) => InitScale::Exponent(g),
            _ => return Err(Error::Config("[model] needs exactly one of `epsilon` or `gamma`".into())),
        };
        scale.std(self.d_m)?;
        Ok(scale)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Gaussian sequences with labels from a hidden direction.
    Binary {
        #[serde(default = "default_binary_n")]
        n: usize,
        #[serde(default = "default_binary_s")]
        s: usize,
        #[serde(default)]
        margin: f64,
    },
    /// Anchor-function token sequences with a frozen embedding.
    Anchor {
        #[serde(default = "default_anchors")]
        anchors: Vec<usize>,
        #[serde(default = "default_key_min")]
        key_min: usize,
        #[serde(default = "default_key_max")]
        key_max: usize,
        #[serde(default = "default_anchor_s")]
        s: usize,
        #[serde(default = "default_true")]
        synonym: bool,
        #[serde(default = "default_anchor_n")]
        n: usize,
        #[serde(default = "default_vocab")]
        vocab: usize,
    },
}

fn default_binary_n() -> usize {
    32
}
fn default_binary_s() -> usize {
    4
}
fn default_anchors() -> Vec<usize> {
    AnchorConfig::default().anchors
}
fn default_key_min() -> usize {
    AnchorConfig::default().key_min
}
fn default_key_max() -> usize {
    AnchorConfig::default().key_max
}
fn default_anchor_s() -> usize {
    AnchorConfig::default().s
}
fn default_anchor_n() -> usize {
    AnchorConfig::default().n
}
fn default_true() -> bool {
    true
}
fn default_vocab() -> usize {
    201
}

impl DatasetConfig {
    /// The anchor task at desk size.
    pub fn anchor_default() -> Self {
        DatasetConfig::Anchor {
            anchors: default_anchors(),
            key_min: default_key_min(),
            key_max: default_key_max(),
            s: default_anchor_s(),
            synonym: true,
            n: default_anchor_n(),
            vocab: default_vocab(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    /// Full batch when absent.
    pub batch_size: Option<usize>,
    pub probe_every: usize,
    pub dense_until: usize,
    pub stage_window: usize,
    pub plateau_tol: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let c = ProbeCadence::default();
        let st = StageConfig::default();
        TrainSection {
            steps: 1000,
            batch_size: None,
            probe_every: c.every,
            dense_until: c.dense_until,
            stage_window: st.window,
            plateau_tol: st.plateau_tol,
        }
    }
}

impl TrainSection {
    pub fn cadence(&self) -> ProbeCadence {
        ProbeCadence {
            every: self.probe_every,
            dense_until: self.dense_until,
        }
    }

    pub fn stage(&self) -> StageConfig {
        StageConfig {
            window: self.stage_window,
            plateau_tol: self.plateau_tol,
        }
    }
}

/// Each entry of `seeds` is a master seed expanding into `count` children.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KqConfig {
    pub d_m: usize,
    /// Build F with a doubly repeated top singular value.
    pub degenerate_top: bool,
    pub init_std: f64,
    /// Target growth of `||W_Q||` over its initial value.
    pub growth: f64,
    /// RK4 step as a fraction of `1 / σ_1(F)`.
    pub dt_scale: f64,
    pub record_every: usize,
}

impl Default for KqConfig {
    fn default() -> Self {
        KqConfig {
            d_m: 3,
            degenerate_top: false,
            init_std: 1e-3,
            growth: 1e3,
            dt_scale: 1e-3,
            record_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaylorConfig {
    pub n: usize,
    pub s: usize,
    pub d_m: usize,
    pub d_ff: usize,
    /// Scale of the outer parameters before the critical shift.
    pub epsilon: f64,
    pub deltas: Vec<f64>,
}

impl Default for TaylorConfig {
    fn default() -> Self {
        TaylorConfig {
            n: 32,
            s: 4,
            d_m: 8,
            d_ff: 8,
            epsilon: 0.5,
            deltas: vec![1e-1, 1e-2, 1e-3, 1e-4],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateConfig {
    /// Repeat the suite in-process and compare the serialized results.
    pub rerun: bool,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        ValidateConfig { rerun: true }
    }
}

impl ExperimentConfig {
    /// Config for the `validate` scenario with the given master seed.
    pub fn validate(master_seed: u64) -> Self {
        ExperimentConfig {
            scenario: Scenario::Validate,
            seeds: vec![master_seed],
            output_dir: None,
            threads: None,
            model: None,
            dataset: None,
            integrator: None,
            optimizer: None,
            schedule: None,
            train: None,
            sweep: None,
            kq: None,
            taylor: None,
            validate: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// sha256 of the config with `output_dir` and `threads` cleared, so
    /// the hash names the experiment rather than where or how it ran.
    pub fn experiment_hash(&self) -> Result<String> {
        let bare = ExperimentConfig {
            output_dir: None,
            threads: None,
            ..self.clone()
        };
        Ok(crate::io::sha256_hex(bare.to_toml_string()?.as_bytes()))
    }

    /// Seeds non-empty and the scenario's sub-tables present and sane.
    pub fn check(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("`seeds` must not be empty".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("`threads` must be at least 1".into()));
        }
        let need = |present: bool, table: &str| -> Result<()> {
            if present {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "scenario `{}` requires a [{table}] table",
                    self.scenario.name()
                )))
            }
        };
        match self.scenario {
            Scenario::EffectiveSim | Scenario::CondensationStudy => {
                need(self.model.is_some(), "model")?;
                self.effective_std()?;
            }
            Scenario::BlowupSweep => {
                need(self.model.is_some(), "model")?;
                need(self.sweep.is_some(), "sweep")?;
                self.effective_std()?;
            }
            Scenario::KqCollapse => {
                need(self.kq.is_some(), "kq")?;
                let kq = self.kq.as_ref().expect("checked");
                if kq.d_m < 2 || !(kq.growth > 1.0) || !(kq.init_std > 0.0) || !(kq.dt_scale > 0.0) {
                    return Err(Error::Config("[kq] needs d_m ≥ 2, growth > 1, init_std > 0, dt_scale > 0".into()));
                }
                if kq.degenerate_top && kq.d_m < 3 {
                    return Err(Error::Config("[kq] degenerate_top needs d_m ≥ 3".into()));
                }
            }
            Scenario::TrainSynthetic => {
                need(self.model.is_some(), "model")?;
                need(self.dataset.is_some(), "dataset")?;
                need(self.optimizer.is_some(), "optimizer")?;
                need(self.train.is_some(), "train")?;
                self.model.as_ref().expect("checked").init_scale()?;
                if let Some(DatasetConfig::Anchor {
                    anchors,
                    key_min,
                    key_max,
                    s,
                    synonym,
                    vocab,
                    ..
                }) = &self.dataset
                {
                    let a = AnchorConfig {
                        anchors: anchors.clone(),
                        key_min: *key_min,
                        key_max: *key_max,
                        s: *s,
                        synonym: *synonym,
                        n: 1,
                        seed: 0,
                    };
                    a.validate()?;
                    if a.min_vocab() > *vocab {
                        return Err(Error::Config(format!(
                            "[dataset] vocab {vocab} is smaller than the {} tokens the anchor task uses",
                            a.min_vocab()
                        )));
                    }
                }
            }
            Scenario::TaylorCheck => {
                need(self.taylor.is_some(), "taylor")?;
                let t = self.taylor.as_ref().expect("checked");
                if t.deltas.len() < 2 || t.deltas.iter().any(|&d| !(d > 0.0)) {
                    return Err(Error::Config("[taylor] needs at least two positive deltas".into()));
                }
            }
            Scenario::Validate => {}
        }
        Ok(())
    }

    /// Initialization std for the effective-dynamics scenarios.
    pub fn effective_std(&self) -> Result<f64> {
        let m = self
            .model
            .as_ref()
            .ok_or_else(|| Error::Config("missing [model]".into()))?;
        match (m.epsilon, m.gamma) {
            (Some(e), None) if e > 0.0 => Ok(e),
            _ => Err(Error::Config(format!(
                "scenario `{}` needs [model] epsilon > 0 (the initialization std)",
                self.scenario.name()
            ))),
        }
    }
}
