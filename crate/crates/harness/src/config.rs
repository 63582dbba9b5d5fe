//! Experiment configuration stored as TOML, one section per stage.

use std::path::{Path, PathBuf};

use dipp_core::align::{AlignConfig, GeneratorWeighting};
use dipp_core::diffusion::{Condition, DsmConfig, GaussianMixture, TimeSampler, SIGMA_DATA};
use dipp_core::generator::SIGMA_INIT;
use dipp_core::nn::{AdamConfig, LrSchedule};
use dipp_core::rewards::{RewardSpec, DEFAULT_QUADRATIC_SCALE};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub sigma_data: f64,
    pub sigma_init: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub p_uncond: f64,
    pub lr_schedule: LrSchedule,
}

/// Settings of one generator-training stage (distill or align).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub k_ta: usize,
    pub alpha_rew: f64,
    pub alpha_cfg: f64,
    pub weighting: GeneratorWeighting,
    pub ema_decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub samples: usize,
    /// Training traces keep every `log_every`-th step in the metrics files.
    pub log_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub mixture: GaussianMixture,
    pub time: TimeSampler,
    pub network: NetworkConfig,
    pub reference: ReferenceConfig,
    pub distill: StageConfig,
    pub align: StageConfig,
    pub reward: RewardSpec,
    pub eval: EvalConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Reference,
    Distill,
    Align,
    Eval,
}

impl Stage {
    fn seed_offset(self) -> u64 {
        match self {
            Stage::Reference => 0,
            Stage::Distill => 1,
            Stage::Align => 2,
            Stage::Eval => 3,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mixture = GaussianMixture::default_benchmark();
        // reward pulls each condition towards its middle mode
        let targets = mixture.conditions.iter().map(|comps| comps[comps.len() / 2].mean.clone()).collect();
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            mixture,
            time: TimeSampler::default(),
            network: NetworkConfig {
                hidden: vec![64, 64, 64],
                sigma_data: SIGMA_DATA,
                sigma_init: SIGMA_INIT,
            },
            reference: ReferenceConfig {
                steps: 80_000,
                batch: 128,
                lr: 2e-3,
                p_uncond: 0.1,
                lr_schedule: LrSchedule::Linear,
            },
            distill: StageConfig {
                steps: 20_000,
                batch: 128,
                lr: 1e-3,
                lr_schedule: LrSchedule::Linear,
                k_ta: 1,
                alpha_rew: 0.0,
                alpha_cfg: 1.0,
                weighting: GeneratorWeighting::Constant,
                ema_decay: 0.95,
            },
            align: StageConfig {
                steps: 5_000,
                batch: 128,
                lr: 1e-3,
                lr_schedule: LrSchedule::Linear,
                k_ta: 1,
                alpha_rew: 10.0,
                alpha_cfg: 1.0,
                weighting: GeneratorWeighting::Constant,
                ema_decay: 0.95,
            },
            reward: RewardSpec::Quadratic {
                targets,
                scale: DEFAULT_QUADRATIC_SCALE,
            },
            eval: EvalConfig {
                samples: 10_000,
                log_every: 100,
            },
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(s).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.normalize_mixture()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            HarnessError::Config(msg) => HarnessError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?).map_err(io_err(path))
    }

    /// Weights that already sum to one are kept bit for bit so that
    /// serialization round trips exactly.
    fn normalize_mixture(&mut self) -> Result<()> {
        let normalized = GaussianMixture::new(self.mixture.dim, self.mixture.conditions.clone())?;
        for (comps, norm) in self.mixture.conditions.iter_mut().zip(normalized.conditions) {
            let total: f64 = comps.iter().map(|k| k.weight).sum();
            if (total - 1.0).abs() > 1e-12 {
                *comps = norm;
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        // TOML integers are signed 64-bit
        if self.seed > i64::MAX as u64 {
            return bad(format!("seed must be at most {}, got {}", i64::MAX, self.seed));
        }
        if self.network.hidden.is_empty() || self.network.hidden.contains(&0) {
            return bad(format!("network.hidden must be non-empty and positive, got {:?}", self.network.hidden));
        }
        if !(self.time.t_min > 0.0 && self.time.t_min < self.time.t_max && self.time.p_std >= 0.0) {
            return bad(format!("invalid time sampler {:?}", self.time));
        }
        if self.reference.batch == 0 || !(0.0..=1.0).contains(&self.reference.p_uncond) {
            return bad("reference needs batch >= 1 and p_uncond in [0, 1]".into());
        }
        if self.distill.alpha_rew != 0.0 {
            return bad("distill.alpha_rew must be 0 (pre-training has no reward)".into());
        }
        if self.eval.samples < 100 {
            return bad(format!("eval.samples must be at least 100, got {}", self.eval.samples));
        }
        if let RewardSpec::Quadratic { targets, .. } = &self.reward {
            if targets.len() != self.mixture.n_conditions() || targets.iter().any(|t| t.len() != self.mixture.dim) {
                return bad("reward targets must give one point per condition in the mixture dimension".into());
            }
        }
        self.align_config(Stage::Distill)?.validate()?;
        self.align_config(Stage::Align)?.validate()?;
        Ok(())
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        self.seed.wrapping_add(stage.seed_offset())
    }

    pub fn dsm_config(&self) -> DsmConfig {
        DsmConfig {
            steps: self.reference.steps,
            batch: self.reference.batch,
            p_uncond: self.reference.p_uncond,
            lr_schedule: self.reference.lr_schedule,
        }
    }

    pub fn align_config(&self, stage: Stage) -> Result<AlignConfig> {
        let s = match stage {
            Stage::Distill => &self.distill,
            Stage::Align => &self.align,
            other => return Err(HarnessError::Config(format!("{other:?} has no generator-training settings"))),
        };
        let adam = AdamConfig {
            lr: s.lr,
            ..AdamConfig::default()
        };
        Ok(AlignConfig {
            alpha_rew: s.alpha_rew,
            alpha_cfg: s.alpha_cfg,
            k_ta: s.k_ta,
            time: self.time,
            weighting: s.weighting,
            batch: s.batch,
            steps: s.steps,
            generator_adam: adam,
            ta_adam: adam,
            lr_schedule: s.lr_schedule,
            ema_decay: s.ema_decay,
            seed: self.stage_seed(stage),
        })
    }

    /// Hash of everything that determines the output of `stage`, chained
    /// through the upstream stages. Eval shares the align hash.
    pub fn stage_hash(&self, stage: Stage) -> [u8; 32] {
        let json = |v: &dyn erased::Json| v.json();
        let mut h = Sha256::new();
        h.update(b"reference");
        h.update(json(&(self.seed, &self.mixture, &self.time, &self.network, &self.reference)));
        if matches!(stage, Stage::Distill | Stage::Align | Stage::Eval) {
            h.update(b"distill");
            h.update(json(&self.distill));
        }
        if matches!(stage, Stage::Align | Stage::Eval) {
            h.update(b"align");
            h.update(json(&(&self.align, &self.reward)));
        }
        h.finalize().into()
    }

    pub fn conditions(&self) -> Vec<Condition> {
        (0..self.mixture.n_conditions()).map(Condition::Label).collect()
    }
}

mod erased {
    pub trait Json {
        fn json(&self) -> Vec<u8>;
    }

    impl<T: serde::Serialize> Json for T {
        fn json(&self) -> Vec<u8> {
            serde_json::to_vec(self).expect("config values serialize")
        }
    }
}

pub fn hex(hash: &[u8; 32]) -> String {
    hash.iter().map(|b| format!("{b:02x}")).collect()
}
