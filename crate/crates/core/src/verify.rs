//! Executable checks of the alignment gradient identities on closed-form
//! Gaussian instances. The oracles here only use closed-form objectives,
//! analytic scores and finite differences.

use std::num::NonZeroUsize;

use gauss_quad::GaussLegendre;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::align::{cfg_combine, generator_pseudo_loss, AlignConfig, GenBatch, GeneratorWeighting, W_GEN_FLOOR};
use crate::diffusion::{Condition, Denoiser, GaussianMixture, MixtureComponent, TimeSampler, SIGMA_DATA};
use crate::error::{Error, Result};
use crate::generator::{OneStepGenerator, SIGMA_INIT};
use crate::rewards::RewardSpec;

/// Machine-readable outcome of one check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub measured_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckReport {
    fn new(name: &str, measured_error: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            measured_error,
            tolerance,
            pass: measured_error <= tolerance,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian {
    pub mean: f64,
    pub var: f64,
}

/// `KL(p || q)` between 1-D Gaussians.
pub fn gaussian_kl(p: Gaussian, q: Gaussian) -> Result<f64> {
    if !(p.var > 0.0 && q.var > 0.0) {
        return Err(Error::Domain(format!("KL needs positive variances, got {} and {}", p.var, q.var)));
    }
    Ok(0.5 * ((q.var / p.var).ln() + (p.var + (p.mean - q.mean).powi(2)) / q.var - 1.0))
}

/// 1-D generator `x = mu + exp(log_sigma) * z`, `z ~ N(0, 1)`, against a
/// Gaussian reference with a quadratic reward on a single condition.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGeneratorInstance {
    pub mu: f64,
    pub log_sigma: f64,
    pub reference: Gaussian,
    /// `None` means a zero reward.
    pub reward: Option<RewardSpec>,
    pub beta: f64,
    /// Constant IKL time weighting.
    pub ikl_weight: f64,
}

impl GaussianGeneratorInstance {
    /// `mu = 0.7`, `log_sigma = -0.2`, reward `-x^2`, `beta = 1`, reference `N(0, 1)`.
    pub fn standard() -> Self {
        Self {
            mu: 0.7,
            log_sigma: -0.2,
            reference: Gaussian { mean: 0.0, var: 1.0 },
            reward: Some(RewardSpec::quadratic(vec![vec![0.0]], 1.0).expect("valid reward")),
            beta: 1.0,
            ikl_weight: 1.0,
        }
    }

    fn with_theta(&self, theta: [f64; 2]) -> Self {
        Self {
            mu: theta[0],
            log_sigma: theta[1],
            ..self.clone()
        }
    }

    fn theta(&self) -> [f64; 2] {
        [self.mu, self.log_sigma]
    }

    fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }

    /// `(target, scale)` of the quadratic reward.
    fn quadratic(&self) -> Result<Option<(f64, f64)>> {
        match &self.reward {
            None => Ok(None),
            Some(RewardSpec::Quadratic { targets, scale }) if targets.len() == 1 && targets[0].len() == 1 => {
                Ok(Some((targets[0][0], *scale)))
            }
            Some(_) => Err(Error::Config("closed-form instance needs a 1-D single-condition quadratic reward".into())),
        }
    }

    /// `E[-r(x)]` in closed form.
    fn expected_neg_reward(&self) -> Result<f64> {
        Ok(match self.quadratic()? {
            None => 0.0,
            Some((target, a)) => a * ((self.mu - target).powi(2) + self.sigma().powi(2)),
        })
    }

    fn reward_grad(&self, x: f64) -> Result<f64> {
        match &self.reward {
            None => Ok(0.0),
            Some(spec) => Ok(spec.grad(&[x], Condition::Label(0), None)?[0]),
        }
    }

    /// `E[-r] + beta * KL(p_theta || p_ref)`.
    pub fn kl_objective(&self) -> Result<f64> {
        let p = Gaussian {
            mean: self.mu,
            var: self.sigma().powi(2),
        };
        Ok(self.expected_neg_reward()? + self.beta * gaussian_kl(p, self.reference)?)
    }

    /// `E[-r] + beta * E_t[w KL(p_theta,t || p_ref,t)]` with `t` from the
    /// truncated log-normal, integrated over `log t` by Gauss-Legendre.
    pub fn ikl_objective(&self, sampler: &TimeSampler, nodes: usize) -> Result<f64> {
        let rule = GaussLegendre::new(
            NonZeroUsize::new(nodes).ok_or_else(|| Error::Config("quadrature needs at least one node".into()))?,
        );
        let (a, b) = (sampler.t_min.ln(), sampler.t_max.ln());
        let density = |u: f64| (-0.5 * ((u - sampler.p_mean) / sampler.p_std).powi(2)).exp();
        let var = self.sigma().powi(2);
        let mut kl_err = None;
        let num = rule.integrate(a, b, |u| {
            let t2 = (2.0 * u).exp();
            let p = Gaussian { mean: self.mu, var: var + t2 };
            let q = Gaussian {
                mean: self.reference.mean,
                var: self.reference.var + t2,
            };
            match gaussian_kl(p, q) {
                Ok(kl) => density(u) * kl,
                Err(e) => {
                    kl_err = Some(e);
                    0.0
                }
            }
        });
        if let Some(e) = kl_err {
            return Err(e);
        }
        let norm = rule.integrate(a, b, density);
        Ok(self.expected_neg_reward()? + self.beta * self.ikl_weight * num / norm)
    }
}

/// Per-coordinate Monte Carlo estimate with its standard error, and the
/// finite-difference reference value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientComparison {
    pub estimate: Vec<f64>,
    pub std_err: Vec<f64>,
    pub fd: Vec<f64>,
}

impl GradientComparison {
    pub fn max_relative_error(&self) -> f64 {
        self.estimate
            .iter()
            .zip(&self.fd)
            .map(|(e, f)| (e - f).abs() / f.abs())
            .fold(0.0, f64::max)
    }

    /// Largest `|estimate - fd| / std_err`.
    pub fn max_z_score(&self) -> f64 {
        self.estimate
            .iter()
            .zip(&self.fd)
            .zip(&self.std_err)
            .map(|((e, f), s)| (e - f).abs() / s)
            .fold(0.0, f64::max)
    }
}

fn mean_and_stderr(samples: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len() as f64;
    let k = samples[0].len();
    let mut mean = vec![0.0; k];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; k];
    for s in samples {
        for ((v, m), x) in var.iter_mut().zip(&mean).zip(s) {
            *v += (x - m).powi(2) / (n - 1.0);
        }
    }
    (mean, var.iter().map(|v| (v / n).sqrt()).collect())
}

fn central_fd(f: impl Fn([f64; 2]) -> Result<f64>, theta: [f64; 2], h: f64) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(2);
    for i in 0..2 {
        let mut p = theta;
        p[i] += h;
        let mut m = theta;
        m[i] -= h;
        out.push((f(p)? - f(m)?) / (2.0 * h));
    }
    Ok(out)
}

/// Monte Carlo estimate of
/// `E[(-grad r(x) + beta (grad log p_theta(x) - grad log p_ref(x))) dx/dtheta]`
/// against central differences of the closed-form KL objective.
pub fn theorem1_gradients(inst: &GaussianGeneratorInstance, n: usize, fd_step: f64, seed: u64) -> Result<GradientComparison> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = inst.sigma();
    let r = inst.reference;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let z: f64 = StandardNormal.sample(&mut rng);
        let x = inst.mu + sigma * z;
        let score_theta = -(x - inst.mu) / (sigma * sigma);
        let score_ref = -(x - r.mean) / r.var;
        let g = -inst.reward_grad(x)? + inst.beta * (score_theta - score_ref);
        samples.push(vec![g, g * sigma * z]);
    }
    let (estimate, std_err) = mean_and_stderr(&samples);
    let fd = central_fd(|th| inst.with_theta(th).kl_objective(), inst.theta(), fd_step)?;
    Ok(GradientComparison { estimate, std_err, fd })
}

pub fn theorem1_check(inst: &GaussianGeneratorInstance, n: usize, fd_step: f64, seed: u64) -> Result<CheckReport> {
    let cmp = theorem1_gradients(inst, n, fd_step, seed)?;
    Ok(CheckReport::new("theorem1-kl-gradient", cmp.max_relative_error(), 1e-2))
}

/// Same as [`theorem1_gradients`] for the integral-KL objective, with the
/// score difference taken at `x_t = x + t eps`.
pub fn theorem2_gradients(
    inst: &GaussianGeneratorInstance,
    sampler: &TimeSampler,
    n: usize,
    nodes: usize,
    fd_step: f64,
    seed: u64,
) -> Result<GradientComparison> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = inst.sigma();
    let r = inst.reference;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let z: f64 = StandardNormal.sample(&mut rng);
        let eps: f64 = StandardNormal.sample(&mut rng);
        let t = sampler.sample_truncated(&mut rng);
        let x0 = inst.mu + sigma * z;
        let xt = x0 + t * eps;
        let score_theta = -(xt - inst.mu) / (sigma * sigma + t * t);
        let score_ref = -(xt - r.mean) / (r.var + t * t);
        let g = -inst.reward_grad(x0)? + inst.beta * inst.ikl_weight * (score_theta - score_ref);
        samples.push(vec![g, g * sigma * z]);
    }
    let (estimate, std_err) = mean_and_stderr(&samples);
    let fd = central_fd(|th| inst.with_theta(th).ikl_objective(sampler, nodes), inst.theta(), fd_step)?;
    Ok(GradientComparison { estimate, std_err, fd })
}

pub fn theorem2_check(inst: &GaussianGeneratorInstance, n: usize, seed: u64) -> Result<CheckReport> {
    let cmp = theorem2_gradients(inst, &TimeSampler::default(), n, 64, 1e-4, seed)?;
    Ok(CheckReport::new("theorem2-ikl-gradient", cmp.max_relative_error(), 2e-2))
}

/// Max absolute difference between the pseudo-loss gradient and the
/// estimator assembled sample by sample from score differences and
/// generator Jacobian rows, on small random networks.
pub fn pseudo_loss_discrepancy(seed: u64, weighting: GeneratorWeighting, alpha_rew: f64, alpha_cfg: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dim, nc) = (2, 3);
    let reference = Denoiser::new(dim, nc, &[8, 8], SIGMA_DATA, &mut rng)?;
    let ta = Denoiser::new(dim, nc, &[8, 8], SIGMA_DATA, &mut rng)?;
    let gen = OneStepGenerator::new(Denoiser::new(dim, nc, &[8, 8], SIGMA_DATA, &mut rng)?, SIGMA_INIT)?;
    let targets: Vec<Vec<f64>> = (0..nc).map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
    let scale = rng.random_range(0.1..2.0);
    let reward = RewardSpec::quadratic(targets.clone(), scale)?;
    let cfg = AlignConfig {
        alpha_rew,
        alpha_cfg,
        weighting,
        ..AlignConfig::default()
    };
    let b = 4;
    let batch = GenBatch::sample(&gen, &cfg.time, b, &mut rng);
    let pl = generator_pseudo_loss(&gen, &ta, &reference, Some(&reward), &cfg, &batch)?;

    let cache = gen.generate_cached(&batch.z, &batch.conds)?;
    let x0 = cache.output().to_vec();
    let mut direct = vec![0.0; pl.grads.len()];
    for i in 0..b {
        let t = batch.t[i];
        let c = batch.conds[i];
        let Condition::Label(label) = c else { unreachable!("generator batches are labelled") };
        let x0_i = &x0[i * dim..(i + 1) * dim];
        let xt: Vec<f64> = x0_i.iter().zip(&batch.noise[i * dim..]).map(|(x, e)| x + t * e).collect();
        let s_ta = ta.score(&xt, &[t], &[c], 0.0)?;
        let s_c = reference.score(&xt, &[t], &[c], 0.0)?;
        let s_null = reference.score(&xt, &[t], &[Condition::Null], 0.0)?;
        let y: Vec<f64> = (0..dim).map(|k| s_ta[k] - (s_null[k] + alpha_cfg * (s_c[k] - s_null[k]))).collect();
        // score-space weight of the denoiser-space update
        let w = match weighting {
            GeneratorWeighting::Constant => t * t,
            GeneratorWeighting::WGen => {
                let norm = t * t * y.iter().map(|v| v * v).sum::<f64>().sqrt();
                t * t / norm.max(W_GEN_FLOOR)
            }
        };
        for k in 0..dim {
            let reward_grad = -2.0 * scale * (x0_i[k] - targets[label][k]);
            let coef = (-alpha_rew * reward_grad + w * y[k]) / b as f64;
            let mut cot = vec![0.0; b * dim];
            cot[i * dim + k] = 1.0;
            let row = gen.backward(&cache, &cot)?;
            for (d, j) in direct.iter_mut().zip(&row) {
                *d += coef * j;
            }
        }
    }
    Ok(pl.grads.iter().zip(&direct).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

pub fn pseudo_loss_equivalence_check(seeds: u64) -> Result<CheckReport> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let weighting = if seed % 2 == 0 {
            GeneratorWeighting::Constant
        } else {
            GeneratorWeighting::WGen
        };
        let alpha_rew = rng.random_range(0.0..3.0);
        let alpha_cfg = rng.random_range(0.0..5.0);
        worst = worst.max(pseudo_loss_discrepancy(seed, weighting, alpha_rew, alpha_cfg)?);
    }
    Ok(CheckReport::new("pseudo-loss-gradient", worst, 1e-10))
}

/// Random mixture with `n_cond` conditions of two components each.
pub fn random_mixture(rng: &mut impl Rng, dim: usize, n_cond: usize) -> GaussianMixture {
    let conditions = (0..n_cond)
        .map(|_| {
            (0..2)
                .map(|_| MixtureComponent {
                    weight: rng.random_range(0.2..1.0),
                    mean: (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect(),
                    variance: rng.random_range(0.2..1.0),
                })
                .collect()
        })
        .collect();
    GaussianMixture::new(dim, conditions).expect("random mixture is valid")
}

/// Per sample, the integrand with implicit log-ratio reward at
/// regularization `beta`,
/// `-w (s_c - s_null) + beta w (s_gen - s_c)`,
/// against the guided integrand `beta w (s_gen - s~)` with scale `1 + 1/beta`.
/// `generator` stands in for the diffused generator distribution. Returns
/// the max absolute discrepancy.
pub fn theorem3_discrepancy(
    mix: &GaussianMixture,
    generator: &GaussianMixture,
    beta: f64,
    n: usize,
    seed: u64,
) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::Domain(format!("beta must be positive, got {beta}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let c = Condition::Label(rng.random_range(0..mix.n_conditions()));
        let t = (rng.random_range(0.05f64.ln()..5.0f64.ln())).exp();
        let w = rng.random_range(0.1..2.0);
        let mut x = generator.sample_one(c, &mut rng)?;
        for v in x.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += t * e;
        }
        let s_c = mix.score(&x, t, c)?;
        let s_null = mix.score(&x, t, Condition::Null)?;
        let s_gen = generator.score(&x, t, c)?;
        let guided = cfg_combine(&s_null, &s_c, 1.0 + 1.0 / beta)?;
        for k in 0..x.len() {
            let implicit = -w * (s_c[k] - s_null[k]) + beta * w * (s_gen[k] - s_c[k]);
            let cfg = beta * w * (s_gen[k] - guided[k]);
            worst = worst.max((implicit - cfg).abs());
        }
    }
    Ok(worst)
}

pub fn theorem3_check(seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mix = random_mixture(&mut rng, 2, 3);
    let generator = random_mixture(&mut rng, 2, 3);
    let mut worst: f64 = 0.0;
    for (i, beta) in [1.0, 2.0 / 5.0, 2.0 / 7.0].into_iter().enumerate() {
        worst = worst.max(theorem3_discrepancy(&mix, &generator, beta, 1000, seed + i as u64)?);
    }
    Ok(CheckReport::new("theorem3-cfg-identity", worst, 1e-12))
}

/// Mean and standard error of `f(x)` for `x` drawn by `sample`.
pub fn expectation_with_stderr<R: Rng>(
    n: usize,
    rng: &mut R,
    mut sample: impl FnMut(&mut R) -> f64,
    f: impl Fn(f64) -> Vec<f64>,
) -> (Vec<f64>, Vec<f64>) {
    let samples: Vec<Vec<f64>> = (0..n).map(|_| f(sample(rng))).collect();
    mean_and_stderr(&samples)
}

/// `E_{x ~ p_theta}[d/dtheta log p_theta(x)]` for the 1-D Gaussian generator:
/// returns `(mean, stderr)` per parameter.
pub fn score_expectation(inst: &GaussianGeneratorInstance, n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mu, sigma) = (inst.mu, inst.sigma());
    expectation_with_stderr(
        n,
        &mut rng,
        |r| {
            let z: f64 = StandardNormal.sample(r);
            mu + sigma * z
        },
        |x| {
            let u = (x - mu) / sigma;
            vec![u / sigma, u * u - 1.0]
        },
    )
}

pub fn score_expectation_vanish_check(inst: &GaussianGeneratorInstance, n: usize, seed: u64) -> CheckReport {
    let (mean, se) = score_expectation(inst, n, seed);
    let z = mean.iter().zip(&se).map(|(m, s)| m.abs() / s).fold(0.0, f64::max);
    CheckReport::new("score-expectation-vanishes", z, 3.0)
}

/// The five identity checks at their standard sizes.
pub fn run_all(seed: u64) -> Result<Vec<CheckReport>> {
    let inst = GaussianGeneratorInstance::standard();
    Ok(vec![
        theorem1_check(&inst, 1_000_000, 1e-4, seed)?,
        theorem2_check(&inst, 1_000_000, seed)?,
        pseudo_loss_equivalence_check(50)?,
        theorem3_check(seed)?,
        score_expectation_vanish_check(&inst, 1_000_000, seed),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_closed_form_cases() {
        let p = Gaussian { mean: 0.0, var: 1.0 };
        assert_eq!(gaussian_kl(p, p).unwrap(), 0.0);
        let q = Gaussian { mean: 1.0, var: 1.0 };
        assert!((gaussian_kl(p, q).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(gaussian_kl(Gaussian { mean: 0.0, var: 0.0 }, q), Err(Error::Domain(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let a = Gaussian {
                mean: rng.random_range(-3.0..3.0),
                var: rng.random_range(0.01..5.0),
            };
            let b = Gaussian {
                mean: rng.random_range(-3.0..3.0),
                var: rng.random_range(0.01..5.0),
            };
            assert!(gaussian_kl(a, b).unwrap() >= 0.0);
        }
    }

    #[test]
    fn kl_matches_quadrature_of_log_ratio() {
        // E_p[log p - log q] on a wide grid
        let p = Gaussian { mean: 0.3, var: 0.7 };
        let q = Gaussian { mean: -0.5, var: 1.8 };
        let lp = |x: f64, g: Gaussian| -0.5 * (2.0 * std::f64::consts::PI * g.var).ln() - 0.5 * (x - g.mean).powi(2) / g.var;
        let rule = GaussLegendre::new(NonZeroUsize::new(200).unwrap());
        let v = rule.integrate(-15.0, 15.0, |x| lp(x, p).exp() * (lp(x, p) - lp(x, q)));
        assert!((v - gaussian_kl(p, q).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn theorem1_standard_instance() {
        let cmp = theorem1_gradients(&GaussianGeneratorInstance::standard(), 1_000_000, 1e-4, 1).unwrap();
        assert!(cmp.max_relative_error() < 1e-2, "{cmp:?}");
    }

    #[test]
    fn theorem1_kl_only_within_three_standard_errors() {
        let inst = GaussianGeneratorInstance {
            reward: None,
            ..GaussianGeneratorInstance::standard()
        };
        let cmp = theorem1_gradients(&inst, 1_000_000, 1e-4, 2).unwrap();
        assert!(cmp.max_z_score() < 3.0, "{cmp:?}");
    }

    #[test]
    fn theorem1_stationary_at_reference() {
        let inst = GaussianGeneratorInstance {
            mu: 0.0,
            log_sigma: 0.0,
            reward: None,
            ..GaussianGeneratorInstance::standard()
        };
        let cmp = theorem1_gradients(&inst, 1_000_000, 1e-4, 3).unwrap();
        for ((e, s), f) in cmp.estimate.iter().zip(&cmp.std_err).zip(&cmp.fd) {
            assert!(e.abs() <= 3.0 * s, "{cmp:?}");
            assert!(f.abs() < 1e-8);
        }
    }

    #[test]
    fn ikl_quadrature_is_normalized() {
        // With a KL that does not depend on t the quadrature returns it exactly.
        let inst = GaussianGeneratorInstance {
            reward: None,
            ..GaussianGeneratorInstance::standard()
        };
        let ikl = inst.ikl_objective(&TimeSampler::default(), 64).unwrap();
        let kl0 = inst.kl_objective().unwrap();
        assert!(ikl > 0.0 && ikl < kl0);
        let at_reference = GaussianGeneratorInstance {
            mu: 0.0,
            log_sigma: 0.0,
            ..inst
        };
        assert_eq!(at_reference.ikl_objective(&TimeSampler::default(), 64).unwrap(), 0.0);
    }

    #[test]
    fn theorem2_standard_instance() {
        let cmp = theorem2_gradients(&GaussianGeneratorInstance::standard(), &TimeSampler::default(), 1_000_000, 64, 1e-4, 4)
            .unwrap();
        assert!(cmp.max_relative_error() < 2e-2, "{cmp:?}");
    }

    #[test]
    fn theorem2_without_ikl_is_reward_gradient() {
        let inst = GaussianGeneratorInstance {
            ikl_weight: 0.0,
            ..GaussianGeneratorInstance::standard()
        };
        let cmp = theorem2_gradients(&inst, &TimeSampler::default(), 200_000, 64, 1e-4, 5).unwrap();
        // d/dtheta of mu^2 + sigma^2
        assert!((cmp.fd[0] - 2.0 * inst.mu).abs() < 1e-8);
        assert!((cmp.fd[1] - 2.0 * inst.sigma().powi(2)).abs() < 1e-8);
        assert!(cmp.max_z_score() < 3.0, "{cmp:?}");
    }

    #[test]
    fn theorem2_stationary_at_reference() {
        let inst = GaussianGeneratorInstance {
            mu: 0.0,
            log_sigma: 0.0,
            reward: None,
            ..GaussianGeneratorInstance::standard()
        };
        let cmp = theorem2_gradients(&inst, &TimeSampler::default(), 200_000, 64, 1e-4, 6).unwrap();
        for (e, s) in cmp.estimate.iter().zip(&cmp.std_err) {
            assert!(e.abs() <= 3.0 * s, "{cmp:?}");
        }
        // generator equals reference, so every score difference is exactly zero
        assert!(cmp.estimate.iter().all(|e| *e == 0.0));
    }

    #[test]
    fn pseudo_loss_matches_direct_assembly() {
        let report = pseudo_loss_equivalence_check(50).unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn pseudo_loss_special_cases() {
        for seed in 0..5 {
            // reward off: score-difference chain only
            assert!(pseudo_loss_discrepancy(seed, GeneratorWeighting::Constant, 0.0, 1.0).unwrap() <= 1e-10);
            assert!(pseudo_loss_discrepancy(seed, GeneratorWeighting::WGen, 0.0, 3.0).unwrap() <= 1e-10);
            assert!(pseudo_loss_discrepancy(seed, GeneratorWeighting::Constant, 2.0, 4.5).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn theorem3_identity_and_scales() {
        let report = theorem3_check(7).unwrap();
        assert!(report.pass, "{report:?}");
        assert!((1.0 + 1.0 / (2.0 / 5.0) - 3.5f64).abs() < 1e-15);
        assert!((1.0 + 1.0 / (2.0 / 7.0) - 4.5f64).abs() < 1e-15);
    }

    #[test]
    fn theorem3_large_beta_recovers_unguided_integrand() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mix = random_mixture(&mut rng, 2, 3);
        let gen = random_mixture(&mut rng, 2, 3);
        let x = [0.4, -1.1];
        let (t, c) = (0.8, Condition::Label(1));
        let s_c = mix.score(&x, t, c).unwrap();
        let s_null = mix.score(&x, t, Condition::Null).unwrap();
        let s_gen = gen.score(&x, t, c).unwrap();
        let mut prev = f64::INFINITY;
        for beta in [1e2, 1e4, 1e6] {
            let guided = cfg_combine(&s_null, &s_c, 1.0 + 1.0 / beta).unwrap();
            let gap: f64 = (0..2).map(|k| ((s_gen[k] - guided[k]) - (s_gen[k] - s_c[k])).abs()).sum();
            assert!(gap < prev);
            prev = gap;
        }
        assert!(prev < 1e-5);
    }

    #[test]
    fn score_expectation_vanishes() {
        let inst = GaussianGeneratorInstance::standard();
        let report = score_expectation_vanish_check(&inst, 1_000_000, 9);
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn score_expectation_parameter_free_slot_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (mean, se) = expectation_with_stderr(
            1000,
            &mut rng,
            |r| StandardNormal.sample(r),
            |x| vec![x, 0.0],
        );
        assert_eq!(mean[1], 0.0);
        assert_eq!(se[1], 0.0);
        assert!(mean[0].abs() <= 3.0 * se[0]);
    }

    #[test]
    fn score_expectation_stderr_scales_with_sqrt_n() {
        let inst = GaussianGeneratorInstance::standard();
        let (_, a) = score_expectation(&inst, 200_000, 11);
        let (_, b) = score_expectation(&inst, 400_000, 12);
        for (x, y) in a.iter().zip(&b) {
            assert!((x / y / 2f64.sqrt() - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn non_quadratic_reward_rejected_by_closed_form() {
        let inst = GaussianGeneratorInstance {
            reward: Some(RewardSpec::cfg_log_ratio(GaussianMixture::gaussian(vec![0.0], 1.0).unwrap(), 1.0)),
            ..GaussianGeneratorInstance::standard()
        };
        assert!(matches!(inst.kl_objective(), Err(Error::Config(_))));
    }

    #[test]
    fn reports_serialize() {
        let r = CheckReport::new("x", 0.5, 1.0);
        assert!(r.pass);
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"measured_error\":0.5"));
        assert!(!CheckReport::new("x", 2.0, 1.0).pass);
    }
}
