//! Diff-Instruct pre-training and Diff-Instruct++ alignment of a one-step
//! generator against a frozen reference denoiser.
//!
//! Every generator step alternates `k_ta` TA regression steps on detached
//! generator samples with one update of the pseudo-loss
//!
//! ```text
//! L(theta) = mean_i [ -alpha_rew * r(x0_i, c_i) + w_i * y_i . x_t,i ]
//! y_i      = d_ta(x_t,i) - d~_ref(x_t,i)          (detached)
//! d~_ref   = d_ref(., null) + alpha_cfg * (d_ref(., c) - d_ref(., null))
//! ```
//!
//! The difference `y` lives in denoiser space. Since `s = (d - x) / t^2`,
//! the score-space weight of the same update is `t^2 * w`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{dsm_step, CleanSource, Condition, Denoiser, TimeSampler};
use crate::error::{Error, Result};
use crate::generator::OneStepGenerator;
use crate::nn::{AdamConfig, AdamState, EmaState, LrSchedule};
use crate::rewards::RewardSpec;

/// Smallest denominator used by [`w_gen_weighting`].
pub const W_GEN_FLOOR: f64 = 1e-8;

/// Loss magnitude beyond which a generator step counts as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorWeighting {
    /// `w = 1` on the denoiser difference.
    #[default]
    Constant,
    /// `w = 1 / ||d_ta - d~_ref||` per sample.
    WGen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub alpha_rew: f64,
    pub alpha_cfg: f64,
    pub k_ta: usize,
    pub time: TimeSampler,
    pub weighting: GeneratorWeighting,
    pub batch: usize,
    pub steps: usize,
    pub generator_adam: AdamConfig,
    pub ta_adam: AdamConfig,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            alpha_rew: 0.0,
            alpha_cfg: 1.0,
            k_ta: 1,
            time: TimeSampler::default(),
            weighting: GeneratorWeighting::Constant,
            batch: 128,
            steps: 20_000,
            generator_adam: AdamConfig::default(),
            ta_adam: AdamConfig::default(),
            lr_schedule: LrSchedule::Constant,
            ema_decay: 0.95,
            seed: 0,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_ta == 0 {
            return Err(Error::Config("k_ta must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(self.alpha_rew >= 0.0 && self.alpha_rew.is_finite()) {
            return Err(Error::Config(format!("alpha_rew must be >= 0, got {}", self.alpha_rew)));
        }
        if !(self.alpha_cfg >= 0.0 && self.alpha_cfg.is_finite()) {
            return Err(Error::Config(format!("alpha_cfg must be >= 0, got {}", self.alpha_cfg)));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema decay {} outside [0, 1]", self.ema_decay)));
        }
        Ok(())
    }
}

/// `s_uncond + alpha * (s_cond - s_uncond)`. Scales 0 and 1 return the
/// corresponding input unchanged.
pub fn cfg_combine(s_uncond: &[f64], s_cond: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if s_uncond.len() != s_cond.len() {
        return Err(Error::dim("cfg_combine", &[s_uncond.len()], &[s_cond.len()]));
    }
    if alpha == 1.0 {
        return Ok(s_cond.to_vec());
    }
    if alpha == 0.0 {
        return Ok(s_uncond.to_vec());
    }
    Ok(s_uncond.iter().zip(s_cond).map(|(u, c)| u + alpha * (c - u)).collect())
}

/// `1 / max(||d_phi - d_ref||, W_GEN_FLOOR)` for one sample.
pub fn w_gen_weighting(d_phi: &[f64], d_ref: &[f64]) -> f64 {
    let norm = d_phi.iter().zip(d_ref).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    1.0 / norm.max(W_GEN_FLOOR)
}

/// Random inputs of one generator step.
#[derive(Clone, Debug, PartialEq)]
pub struct GenBatch {
    pub conds: Vec<Condition>,
    pub z: Vec<f64>,
    pub t: Vec<f64>,
    pub noise: Vec<f64>,
}

impl GenBatch {
    pub fn sample<R: Rng>(gen: &OneStepGenerator, time: &TimeSampler, batch: usize, rng: &mut R) -> Self {
        let nc = gen.denoiser().n_conditions();
        let conds = (0..batch).map(|_| Condition::Label(rng.random_range(0..nc))).collect();
        let z = gen.sample_latent(batch, rng);
        let t = time.sample_batch(batch, rng);
        let noise = (0..batch * gen.dim()).map(|_| StandardNormal.sample(rng)).collect();
        Self { conds, z, t, noise }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLoss {
    pub loss: f64,
    pub grads: Vec<f64>,
    pub mean_reward: Option<f64>,
    /// Batch mean of `||d_ta - d~_ref||`.
    pub score_diff_norm: f64,
}

/// Guided reference denoiser output at `(x, t, c)`.
pub fn guided_reference(reference: &Denoiser, x: &[f64], t: &[f64], conds: &[Condition], alpha_cfg: f64) -> Result<Vec<f64>> {
    let d_cond = reference.denoise(x, t, conds)?;
    if alpha_cfg == 1.0 {
        return Ok(d_cond);
    }
    let nulls = vec![Condition::Null; conds.len()];
    let d_null = reference.denoise(x, t, &nulls)?;
    cfg_combine(&d_null, &d_cond, alpha_cfg)
}

/// Value and parameter gradient of the generator pseudo-loss on a fixed
/// batch. The reward is evaluated on the clean sample (at `t = 0` for
/// time-dependent rewards).
pub fn generator_pseudo_loss(
    gen: &OneStepGenerator,
    ta: &Denoiser,
    reference: &Denoiser,
    reward: Option<&RewardSpec>,
    cfg: &AlignConfig,
    batch: &GenBatch,
) -> Result<PseudoLoss> {
    let n = batch.conds.len();
    let dim = gen.dim();
    if batch.t.len() != n || batch.noise.len() != n * dim {
        return Err(Error::dim("generator batch", &[n, n * dim], &[batch.t.len(), batch.noise.len()]));
    }
    if let Some(&t) = batch.t.iter().find(|&&t| t < cfg.time.t_min) {
        return Err(Error::Schedule {
            t,
            t_min: cfg.time.t_min,
            t_max: cfg.time.t_max,
        });
    }
    if cfg.alpha_rew != 0.0 && reward.is_none() {
        return Err(Error::Config("alpha_rew > 0 needs a reward".into()));
    }

    let cache = gen.generate_cached(&batch.z, &batch.conds)?;
    let x0 = cache.output();
    let mut xt = x0.to_vec();
    for ((xi, ni), &ti) in xt.chunks_exact_mut(dim).zip(batch.noise.chunks_exact(dim)).zip(&batch.t) {
        for (x, e) in xi.iter_mut().zip(ni) {
            *x += ti * e;
        }
    }

    let d_ta = ta.denoise(&xt, &batch.t, &batch.conds)?;
    let d_ref = guided_reference(reference, &xt, &batch.t, &batch.conds, cfg.alpha_cfg)?;

    let rewards = match reward {
        Some(spec) => {
            let t0 = spec.needs_time().then_some(0.0);
            Some(spec.eval_batch(x0, &batch.conds, t0)?)
        }
        None => None,
    };

    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut diff_norm = 0.0;
    let mut cot = vec![0.0; n * dim];
    for i in 0..n {
        let s = i * dim..(i + 1) * dim;
        let y: Vec<f64> = d_ta[s.clone()].iter().zip(&d_ref[s.clone()]).map(|(a, b)| a - b).collect();
        diff_norm += y.iter().map(|v| v * v).sum::<f64>().sqrt() * inv_n;
        let w = match cfg.weighting {
            GeneratorWeighting::Constant => 1.0,
            GeneratorWeighting::WGen => w_gen_weighting(&d_ta[s.clone()], &d_ref[s.clone()]),
        };
        loss += w * y.iter().zip(&xt[s.clone()]).map(|(a, b)| a * b).sum::<f64>() * inv_n;
        for (c, yi) in cot[s.clone()].iter_mut().zip(&y) {
            *c = w * yi * inv_n;
        }
        if cfg.alpha_rew != 0.0 {
            let (values, grads) = rewards.as_ref().expect("reward checked above");
            loss -= cfg.alpha_rew * values[i] * inv_n;
            for (c, g) in cot[s].iter_mut().zip(&grads[i * dim..(i + 1) * dim]) {
                *c -= cfg.alpha_rew * g * inv_n;
            }
        }
    }
    let grads = gen.backward(&cache, &cot)?;
    Ok(PseudoLoss {
        loss,
        grads,
        mean_reward: rewards.map(|(v, _)| v.iter().sum::<f64>() * inv_n),
        score_diff_norm: diff_norm,
    })
}

/// `k_ta` regression steps of the TA denoiser on detached samples from
/// `source`. Returns the mean loss.
pub fn ta_update<R: Rng>(
    ta: &mut Denoiser,
    adam: &mut AdamState,
    source: &dyn CleanSource,
    cfg: &AlignConfig,
    lr_scale: f64,
    rng: &mut R,
) -> Result<f64> {
    if cfg.k_ta == 0 {
        return Err(Error::Config("k_ta must be at least 1".into()));
    }
    let mut total = 0.0;
    for _ in 0..cfg.k_ta {
        let loss = dsm_step(ta, source, &cfg.time, adam, cfg.batch, 0.0, lr_scale, rng)?;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("TA loss is {loss}")));
        }
        total += loss;
    }
    Ok(total / cfg.k_ta as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub ta_loss: f64,
    pub pseudo_loss: f64,
    pub mean_reward: Option<f64>,
    pub score_diff_norm: f64,
}

#[derive(Clone, Debug)]
pub struct AlignState {
    pub generator: OneStepGenerator,
    pub generator_adam: AdamState,
    pub ema: EmaState,
    pub ta: Denoiser,
    pub ta_adam: AdamState,
    pub step: usize,
    pub trace: Vec<StepRecord>,
}

impl AlignState {
    /// Generator from `base`; TA initialized as a copy of `reference`.
    pub fn new(base: &OneStepGenerator, reference: &Denoiser, cfg: &AlignConfig) -> Result<Self> {
        cfg.validate()?;
        if !base.denoiser().same_architecture(reference) {
            return Err(Error::Config("generator and reference architectures differ".into()));
        }
        let n = reference.net().num_params();
        Ok(Self {
            generator: base.clone(),
            generator_adam: AdamState::new(cfg.generator_adam, n)?,
            ema: EmaState::new(cfg.ema_decay, base.params())?,
            ta: reference.clone(),
            ta_adam: AdamState::new(cfg.ta_adam, n)?,
            step: 0,
            trace: Vec::new(),
        })
    }

    /// Generator carrying the EMA parameters.
    pub fn ema_generator(&self) -> OneStepGenerator {
        let mut g = self.generator.clone();
        g.params_mut().copy_from_slice(self.ema.shadow());
        g
    }
}

/// Runs the alternating loop for `cfg.steps` generator updates starting
/// from `base`. The reference is only read.
pub fn dipp_align(
    base: &OneStepGenerator,
    reference: &Denoiser,
    reward: Option<&RewardSpec>,
    cfg: &AlignConfig,
) -> Result<AlignState> {
    let mut state = AlignState::new(base, reference, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for step in 0..cfg.steps {
        let scale = cfg.lr_schedule.factor(step, cfg.steps);
        let ta_loss = ta_update(&mut state.ta, &mut state.ta_adam, &state.generator, cfg, scale, &mut rng)
            .map_err(|e| at_step(e, "TA update", step))?;

        let batch = GenBatch::sample(&state.generator, &cfg.time, cfg.batch, &mut rng);
        let pl = generator_pseudo_loss(&state.generator, &state.ta, reference, reward, cfg, &batch)?;
        if !pl.loss.is_finite() || pl.loss.abs() > DIVERGENCE_LIMIT {
            return Err(Error::Divergence(format!("generator pseudo-loss is {} at step {step}", pl.loss)));
        }
        state
            .generator
            .denoiser_mut()
            .net_mut()
            .adam_step_scaled(&mut state.generator_adam, &pl.grads, scale)
            .map_err(|e| at_step(e, "generator update", step))?;
        if !state.generator.params().iter().all(|p| p.is_finite()) {
            return Err(Error::Divergence(format!("non-finite generator parameter at step {step}")));
        }
        state.ema.update(state.generator.params())?;
        state.step += 1;
        state.trace.push(StepRecord {
            step,
            ta_loss,
            pseudo_loss: pl.loss,
            mean_reward: pl.mean_reward,
            score_diff_norm: pl.score_diff_norm,
        });
    }
    Ok(state)
}

/// Diff-Instruct: the same loop with no reward, generator initialized from
/// the reference.
pub fn diff_instruct_pretrain(reference: &Denoiser, sigma_init: f64, cfg: &AlignConfig) -> Result<AlignState> {
    if cfg.alpha_rew != 0.0 {
        return Err(Error::Config("pre-training runs without reward (alpha_rew = 0)".into()));
    }
    let base = OneStepGenerator::from_reference(reference, sigma_init)?;
    dipp_align(&base, reference, None, cfg)
}

fn at_step(e: Error, what: &str, step: usize) -> Error {
    match e {
        Error::Divergence(msg) => Error::Divergence(format!("{what} at step {step}: {msg}")),
        other => other,
    }
}
