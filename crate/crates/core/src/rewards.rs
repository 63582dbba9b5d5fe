//! Differentiable rewards `r(x, c)` with exact gradients.

use serde::{Deserialize, Serialize};

use crate::diffusion::{Condition, GaussianMixture};
use crate::error::{Error, Result};

/// One side of a log-ratio: a mixture evaluated either at the sample's own
/// label or at the null (marginal) condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityRef {
    pub mixture: GaussianMixture,
    pub conditional: bool,
}

impl DensityRef {
    fn cond(&self, c: Condition) -> Condition {
        if self.conditional {
            c
        } else {
            Condition::Null
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RewardSpec {
    /// `r(x, c) = -scale * ||x - targets[c]||^2`.
    Quadratic { targets: Vec<Vec<f64>>, scale: f64 },
    /// `r(x_t, t, c) = weight * [log p_num(x_t | t, c) - log p_den(x_t | t, c)]`.
    CfgLogRatio {
        numerator: DensityRef,
        denominator: DensityRef,
        weight: f64,
    },
}

pub const DEFAULT_QUADRATIC_SCALE: f64 = 0.5;

impl RewardSpec {
    pub fn quadratic(targets: Vec<Vec<f64>>, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("quadratic reward scale must be positive, got {scale}")));
        }
        if targets.is_empty() || targets.iter().any(|t| t.len() != targets[0].len()) {
            return Err(Error::Config("quadratic reward needs equal-length targets for every condition".into()));
        }
        Ok(RewardSpec::Quadratic { targets, scale })
    }

    /// The implicit guidance reward: conditional over marginal density of
    /// the same mixture.
    pub fn cfg_log_ratio(mixture: GaussianMixture, weight: f64) -> Self {
        RewardSpec::CfgLogRatio {
            numerator: DensityRef {
                mixture: mixture.clone(),
                conditional: true,
            },
            denominator: DensityRef {
                mixture,
                conditional: false,
            },
            weight,
        }
    }

    /// Same reward with numerator and denominator exchanged.
    pub fn swapped(&self) -> Self {
        match self {
            RewardSpec::CfgLogRatio {
                numerator,
                denominator,
                weight,
            } => RewardSpec::CfgLogRatio {
                numerator: denominator.clone(),
                denominator: numerator.clone(),
                weight: *weight,
            },
            other => other.clone(),
        }
    }

    pub fn needs_time(&self) -> bool {
        matches!(self, RewardSpec::CfgLogRatio { .. })
    }

    fn target(&self, targets: &[Vec<f64>], x: &[f64], c: Condition) -> Result<Vec<f64>> {
        let Condition::Label(l) = c else {
            return Err(Error::Config("quadratic reward needs a concrete condition".into()));
        };
        let target = targets
            .get(l)
            .ok_or_else(|| Error::Config(format!("no reward target for condition {l}")))?;
        if target.len() != x.len() {
            return Err(Error::dim("reward input", &[target.len()], &[x.len()]));
        }
        Ok(target.clone())
    }

    fn time(&self, t: Option<f64>) -> Result<f64> {
        t.ok_or_else(|| Error::Usage("cfg-log-ratio reward needs a time argument".into()))
    }

    pub fn eval(&self, x: &[f64], c: Condition, t: Option<f64>) -> Result<f64> {
        match self {
            RewardSpec::Quadratic { targets, scale } => {
                let target = self.target(targets, x, c)?;
                Ok(-scale * x.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            }
            RewardSpec::CfgLogRatio {
                numerator,
                denominator,
                weight,
            } => {
                let t = self.time(t)?;
                let num = numerator.mixture.log_density(x, t, numerator.cond(c))?;
                let den = denominator.mixture.log_density(x, t, denominator.cond(c))?;
                Ok(weight * (num - den))
            }
        }
    }

    pub fn grad(&self, x: &[f64], c: Condition, t: Option<f64>) -> Result<Vec<f64>> {
        match self {
            RewardSpec::Quadratic { targets, scale } => {
                let target = self.target(targets, x, c)?;
                Ok(x.iter().zip(&target).map(|(a, b)| -2.0 * scale * (a - b)).collect())
            }
            RewardSpec::CfgLogRatio {
                numerator,
                denominator,
                weight,
            } => {
                let t = self.time(t)?;
                let num = numerator.mixture.score(x, t, numerator.cond(c))?;
                let den = denominator.mixture.score(x, t, denominator.cond(c))?;
                Ok(num.iter().zip(&den).map(|(a, b)| weight * (a - b)).collect())
            }
        }
    }

    /// Rewards and gradients for a flat batch, each sample evaluated at
    /// time `t` when the variant needs one.
    pub fn eval_batch(&self, x: &[f64], conds: &[Condition], t: Option<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        if conds.is_empty() || x.len() % conds.len() != 0 {
            return Err(Error::dim("reward batch", &[conds.len()], &[x.len()]));
        }
        let dim = x.len() / conds.len();
        let mut values = Vec::with_capacity(conds.len());
        let mut grads = Vec::with_capacity(x.len());
        for (xi, &c) in x.chunks_exact(dim).zip(conds) {
            values.push(self.eval(xi, c, t)?);
            grads.extend(self.grad(xi, c, t)?);
        }
        Ok((values, grads))
    }
}
