//! Sample-based evaluation of generators and the Euler reference sampler.

use dipp_core::diffusion::{CleanSource, Condition, Denoise, DiffusionSchedule, GaussianMixture};
use dipp_core::rewards::RewardSpec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::metrics::MetricRecord;

pub const MIN_EVAL_SAMPLES: usize = 100;

/// Energy distance `2 E|X-Y| - E|X-X'| - E|Y-Y'|` with unbiased
/// within-sample terms. `a` and `b` are flat `dim`-wide batches.
pub fn energy_distance(a: &[f64], b: &[f64], dim: usize) -> Result<f64> {
    if dim == 0 || a.len() % dim != 0 || b.len() % dim != 0 {
        return Err(HarnessError::Usage(format!("sample batches not a multiple of dim {dim}")));
    }
    let (na, nb) = (a.len() / dim, b.len() / dim);
    if na < 2 || nb < 2 {
        return Err(HarnessError::Usage("energy distance needs at least two samples per side".into()));
    }
    let dist = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    let within = |s: &[f64], n: usize| {
        let mut acc = 0.0;
        for (i, x) in s.chunks_exact(dim).enumerate() {
            for y in s.chunks_exact(dim).skip(i + 1) {
                acc += dist(x, y);
            }
        }
        acc / (n * (n - 1) / 2) as f64
    };
    let mut cross = 0.0;
    for x in a.chunks_exact(dim) {
        for y in b.chunks_exact(dim) {
            cross += dist(x, y);
        }
    }
    cross /= (na * nb) as f64;
    Ok(2.0 * cross - within(a, na) - within(b, nb))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub mean_reward: Option<f64>,
    /// Average over conditions of the per-condition energy distance.
    pub energy_distance: f64,
    pub per_condition_energy_distance: Vec<f64>,
    pub mean_error: f64,
    pub per_condition_mean_error: Vec<f64>,
    /// Mean of `log p(x|c) - log p(x)` under the clean mixture.
    pub log_ratio: f64,
}

impl EvalReport {
    pub fn record(&self, step: u64) -> MetricRecord {
        MetricRecord {
            step,
            mean_reward: self.mean_reward,
            energy_distance: Some(self.energy_distance),
            mean_error: Some(self.mean_error),
            log_ratio: Some(self.log_ratio),
            ..MetricRecord::default()
        }
    }
}

/// Draws `n` samples split evenly over the conditions from `source` and
/// the same number from `mix`, and compares them.
pub fn eval_generator(
    source: &dyn CleanSource,
    mix: &GaussianMixture,
    reward: Option<&RewardSpec>,
    n: usize,
    seed: u64,
) -> Result<EvalReport> {
    if n < MIN_EVAL_SAMPLES {
        return Err(HarnessError::Usage(format!("evaluation needs at least {MIN_EVAL_SAMPLES} samples, got {n}")));
    }
    let n_cond = mix.n_conditions();
    if source.dim() != mix.dim || source.n_conditions() != n_cond {
        return Err(HarnessError::Usage(format!(
            "generator ({} dims, {} conditions) does not match the mixture ({} dims, {n_cond} conditions)",
            source.dim(),
            source.n_conditions(),
            mix.dim
        )));
    }
    let dim = mix.dim;
    let log_ratio = RewardSpec::cfg_log_ratio(mix.clone(), 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut eds, mut errs) = (Vec::new(), Vec::new());
    let (mut reward_sum, mut ratio_sum) = (0.0, 0.0);
    for c in 0..n_cond {
        let count = n / n_cond + usize::from(c < n % n_cond);
        let conds = vec![Condition::Label(c); count];
        let x = source.sample_clean(&conds, &mut rng)?;
        let y = mix.sample_clean(&conds, &mut rng)?;
        eds.push(energy_distance(&x, &y, dim)?);

        let truth = mix.mean(Condition::Label(c))?;
        let mut gm = vec![0.0; dim];
        for xi in x.chunks_exact(dim) {
            for (g, v) in gm.iter_mut().zip(xi) {
                *g += v / count as f64;
            }
        }
        errs.push(gm.iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());

        let at_zero = Some(0.0);
        ratio_sum += log_ratio.eval_batch(&x, &conds, at_zero)?.0.iter().sum::<f64>();
        if let Some(r) = reward {
            reward_sum += r.eval_batch(&x, &conds, at_zero)?.0.iter().sum::<f64>();
        }
    }
    Ok(EvalReport {
        samples: n,
        mean_reward: reward.map(|_| reward_sum / n as f64),
        energy_distance: eds.iter().sum::<f64>() / n_cond as f64,
        per_condition_energy_distance: eds,
        mean_error: errs.iter().cloned().fold(0.0, f64::max),
        per_condition_mean_error: errs,
        log_ratio: ratio_sum / n as f64,
    })
}

/// Probability-flow Euler integration from `schedule.t_max` down to
/// `schedule.t_min` on `steps` log-spaced intervals, starting from
/// `x_init` (usually `t_max` times standard normal noise).
pub fn euler_sample(
    den: &dyn Denoise,
    x_init: &[f64],
    conds: &[Condition],
    steps: usize,
    schedule: &DiffusionSchedule,
) -> Result<Vec<f64>> {
    if steps < 2 {
        return Err(HarnessError::Config(format!("Euler sampler needs at least 2 steps, got {steps}")));
    }
    let dim = den.dim();
    if x_init.len() != conds.len() * dim {
        return Err(HarnessError::Usage(format!(
            "initial batch has {} values, expected {} x {dim}",
            x_init.len(),
            conds.len()
        )));
    }
    let ratio = schedule.t_min / schedule.t_max;
    let times: Vec<f64> = (0..=steps)
        .map(|i| schedule.t_max * ratio.powf(i as f64 / steps as f64))
        .collect();
    let mut x = x_init.to_vec();
    for w in times.windows(2) {
        let (t, t_next) = (w[0], w[1]);
        let tv = vec![t; conds.len()];
        let d = den.denoise_batch(&x, &tv, conds)?;
        // dx/dt = -t * score = (x - d) / t
        for (xi, di) in x.iter_mut().zip(&d) {
            *xi += (t_next - t) * (*xi - di) / t;
        }
    }
    Ok(x)
}
